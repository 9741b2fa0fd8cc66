import { ApiClient, ApiError } from "./api.js";
import { formatPercent } from "./format.js";
import { ListingState } from "./state.js";
import type { ListingDraft } from "./types.js";

/**
 * Listing-prefill app: upload a car photo, review ranked make/model
 * predictions, accept or correct them, and emit the final draft as JSON.
 *
 * Rows are rendered in API order with the raw confidence stored on the
 * element; only the displayed text is formatted. A new upload aborts any
 * request still in flight.
 */
export class App {
  readonly state = new ListingState();
  private inflight: AbortController | null = null;

  readonly dropzone: HTMLDivElement;
  readonly fileInput: HTMLInputElement;
  readonly preview: HTMLImageElement;
  readonly status: HTMLParagraphElement;
  readonly errorRegion: HTMLParagraphElement;
  readonly rows: HTMLUListElement;
  readonly makeInput: HTMLInputElement;
  readonly modelInput: HTMLInputElement;
  readonly makeError: HTMLSpanElement;
  readonly modelError: HTMLSpanElement;
  readonly sourceNote: HTMLParagraphElement;
  readonly submitButton: HTMLButtonElement;
  readonly draftOutput: HTMLPreElement;

  constructor(
    readonly container: HTMLElement,
    readonly api: ApiClient,
    readonly onDraft: (draft: ListingDraft) => void = () => {},
    readonly topK = 5,
  ) {
    const doc = container.ownerDocument;
    const el = <K extends keyof HTMLElementTagNameMap>(
      tag: K,
      className: string,
      parent: HTMLElement,
    ): HTMLElementTagNameMap[K] => {
      const node = doc.createElement(tag);
      node.className = className;
      parent.appendChild(node);
      return node;
    };

    this.dropzone = el("div", "dropzone", container);
    this.dropzone.textContent = "Drop a car photo here or ";
    const pick = el("button", "pick", this.dropzone);
    pick.textContent = "choose a file";
    this.fileInput = el("input", "file-input", this.dropzone);
    this.fileInput.type = "file";
    this.fileInput.accept = "image/*";

    this.status = el("p", "status", container);
    this.errorRegion = el("p", "error", container);
    this.preview = el("img", "preview", container);
    this.rows = el("ul", "predictions", container);

    const form = el("div", "listing-form", container);
    const makeLabel = el("label", "field", form);
    makeLabel.textContent = "Make ";
    this.makeInput = el("input", "make", makeLabel);
    this.makeError = el("span", "field-error make-error", makeLabel);
    const modelLabel = el("label", "field", form);
    modelLabel.textContent = "Model ";
    this.modelInput = el("input", "model", modelLabel);
    this.modelError = el("span", "field-error model-error", modelLabel);
    this.sourceNote = el("p", "source-note", form);
    this.submitButton = el("button", "submit", form);
    this.submitButton.textContent = "Create listing";
    this.draftOutput = el("pre", "draft-output", container);

    pick.addEventListener("click", () => this.fileInput.click());
    this.fileInput.addEventListener("change", () => {
      const file = this.fileInput.files?.[0];
      if (file) void this.handleFile(file);
    });
    this.dropzone.addEventListener("dragover", (e) => e.preventDefault());
    this.dropzone.addEventListener("drop", (e) => {
      e.preventDefault();
      const file = (e as DragEvent).dataTransfer?.files?.[0];
      if (file) void this.handleFile(file);
    });
    this.makeInput.addEventListener("input", () => this.onManualEdit());
    this.modelInput.addEventListener("input", () => this.onManualEdit());
    this.submitButton.addEventListener("click", () => this.submit());
  }

  async handleFile(file: File | Blob): Promise<void> {
    this.inflight?.abort(); // at most one request in flight
    const controller = new AbortController();
    this.inflight = controller;
    this.errorRegion.textContent = "";
    this.status.textContent = "Identifying…";
    this.showPreview(file);
    try {
      const name = file instanceof File ? file.name : null;
      const response = await this.api.predict(file, this.topK, controller.signal);
      if (controller.signal.aborted) return;
      this.state.setPredictions(response, name);
      this.status.textContent = "";
      this.renderRows();
      this.renderForm();
    } catch (err) {
      if (err instanceof DOMException && err.name === "AbortError") return;
      this.status.textContent = "";
      this.errorRegion.textContent =
        err instanceof ApiError ? err.message : "Something went wrong; try again";
    } finally {
      if (this.inflight === controller) this.inflight = null;
    }
  }

  private showPreview(file: File | Blob): void {
    try {
      const url = this.container.ownerDocument.defaultView?.URL?.createObjectURL?.(file);
      if (url) this.preview.src = url;
    } catch {
      // previews are cosmetic; environments without object URLs skip them
    }
  }

  renderRows(): void {
    this.rows.replaceChildren();
    const response = this.state.response;
    if (!response) return;
    const doc = this.container.ownerDocument;
    response.predictions.forEach((p, index) => {
      const row = doc.createElement("li");
      row.className = "prediction-row" +
        (index === this.state.selectedIndex && !this.state.isManual ? " selected" : "");
      row.dataset.index = String(index);
      row.dataset.confidence = String(p.confidence); // raw payload value

      const bar = doc.createElement("div");
      bar.className = "confidence-bar";
      bar.style.width = `${p.confidence * 100}%`;
      row.appendChild(bar);

      const label = doc.createElement("span");
      label.className = "row-label";
      label.textContent = `${p.make} ${p.model_name}`;
      row.appendChild(label);

      const pct = doc.createElement("span");
      pct.className = "row-confidence";
      pct.textContent = formatPercent(p.confidence);
      row.appendChild(pct);

      row.addEventListener("click", () => {
        this.state.selectRow(index);
        this.renderRows();
        this.renderForm();
      });
      this.rows.appendChild(row);
    });
  }

  renderForm(): void {
    const { make, model } = this.state.fields();
    this.makeInput.value = make;
    this.modelInput.value = model;
    this.makeError.textContent = "";
    this.modelError.textContent = "";
    const selected = this.state.response?.predictions[this.state.selectedIndex];
    if (this.state.isManual || !selected) {
      this.sourceNote.textContent = "manual entry";
    } else {
      this.sourceNote.textContent = `from prediction (${formatPercent(selected.confidence)})`;
    }
  }

  private onManualEdit(): void {
    this.state.setManual(this.makeInput.value, this.modelInput.value);
    this.sourceNote.textContent = "manual entry";
  }

  submit(): ListingDraft | null {
    const errors = this.state.validate();
    this.makeError.textContent = errors.make ?? "";
    this.modelError.textContent = errors.model ?? "";
    if (errors.make || errors.model) return null;
    const draft = this.state.draft();
    this.draftOutput.textContent = JSON.stringify(draft, null, 2);
    this.downloadDraft(draft);
    this.onDraft(draft);
    return draft;
  }

  private downloadDraft(draft: ListingDraft): void {
    const doc = this.container.ownerDocument;
    const win = doc.defaultView;
    try {
      const url = win?.URL?.createObjectURL?.(
        new Blob([JSON.stringify(draft, null, 2)], { type: "application/json" }),
      );
      if (!url) return;
      const anchor = doc.createElement("a");
      anchor.href = url;
      anchor.download = "listing-draft.json";
      anchor.click();
      win?.URL?.revokeObjectURL?.(url);
    } catch {
      // downloads are a convenience; the draft is still in draftOutput/onDraft
    }
  }
}

export function initApp(doc: Document, baseUrl = ""): App {
  const container = doc.getElementById("app");
  if (!container) throw new Error("missing #app container");
  return new App(container as HTMLElement, new ApiClient(baseUrl));
}
