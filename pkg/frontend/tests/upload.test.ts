import { describe, expect, it } from "vitest";

import { ApiError } from "../src/api.js";
import { FIVE_PREDICTIONS, imageBlob, mountApp, stubApi } from "./helpers.js";

describe("upload-and-predict flow", () => {
  it("renders one row per prediction in API order with the top-1 preselected", async () => {
    const app = mountApp(stubApi(async () => FIVE_PREDICTIONS));
    await app.handleFile(imageBlob());

    const rows = [...app.rows.querySelectorAll("li")];
    expect(rows).toHaveLength(5);
    expect(rows[0].classList.contains("selected")).toBe(true);
    expect(rows.slice(1).every((r) => !r.classList.contains("selected"))).toBe(true);

    // rendered confidences equal the payload floats exactly, no reordering
    const raw = rows.map((r) => r.dataset.confidence);
    expect(raw).toEqual(FIVE_PREDICTIONS.predictions.map((p) => String(p.confidence)));
    const labels = rows.map((r) => r.querySelector(".row-label")?.textContent);
    expect(labels[0]).toBe("Falcon Roadster");
    expect(labels[4]).toBe("Vega Coupe");
    expect(rows[0].querySelector(".row-confidence")?.textContent).toBe("61.3%");

    // form prefilled from top-1
    expect(app.makeInput.value).toBe("Falcon");
    expect(app.modelInput.value).toBe("Roadster");
  });

  it("surfaces an oversized-upload rejection with the server's message", async () => {
    const app = mountApp(
      stubApi(async () => {
        throw new ApiError("upload exceeds the 10 MB limit", "upload_too_large", 413);
      }),
    );
    await app.handleFile(imageBlob());
    expect(app.errorRegion.textContent).toContain("10 MB");
    expect(app.rows.querySelectorAll("li")).toHaveLength(0);
  });

  it("surfaces an unreachable service as an inline message", async () => {
    const app = mountApp(
      stubApi(async () => {
        throw new ApiError("Prediction service is unreachable", "service_down", null);
      }),
    );
    await app.handleFile(imageBlob());
    expect(app.errorRegion.textContent).toMatch(/unreachable/i);
  });

  it("clicking row 3 switches the form and marks the source as an alternative", async () => {
    const app = mountApp(stubApi(async () => FIVE_PREDICTIONS));
    await app.handleFile(imageBlob());

    const row3 = app.rows.querySelectorAll("li")[2] as HTMLLIElement;
    row3.click();

    expect(app.makeInput.value).toBe("Titan");
    expect(app.modelInput.value).toBe("Pickup");
    expect(app.state.source()).toBe("accepted_alternative");
    const rows = [...app.rows.querySelectorAll("li")];
    expect(rows[2].classList.contains("selected")).toBe(true);
    expect(rows[0].classList.contains("selected")).toBe(false);
  });

  it("a new upload aborts the request still in flight", async () => {
    let resolveFirst: ((value: typeof FIVE_PREDICTIONS) => void) | null = null;
    const api = stubApi(
      (signal) =>
        new Promise((resolve, reject) => {
          if (api.calls.length === 1) {
            resolveFirst = resolve;
            signal?.addEventListener("abort", () =>
              reject(new DOMException("aborted", "AbortError")),
            );
          } else {
            resolve(FIVE_PREDICTIONS);
          }
        }),
    );
    const app = mountApp(api);
    const first = app.handleFile(imageBlob());
    const second = app.handleFile(imageBlob());
    await Promise.all([first, second]);

    expect(api.calls).toHaveLength(2);
    expect(api.calls[0].signal?.aborted).toBe(true);
    expect(app.rows.querySelectorAll("li")).toHaveLength(5);
    expect(resolveFirst).not.toBeNull();
  });
});
