import { initApp } from "./app.js";

const params = new URLSearchParams(window.location.search);
initApp(document, params.get("api") ?? "http://127.0.0.1:8000");
