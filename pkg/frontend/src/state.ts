import type { ListingDraft, PredictResponse, PredictionSource } from "./types.js";

/**
 * Listing-draft state machine.
 *
 * Everything is reconstructible from (last API response, selected row,
 * manual edits); confidences are kept exactly as the API returned them.
 * The draft's source records whether the seller accepted the top
 * prediction, picked an alternative row, or typed the fields by hand.
 */
export class ListingState {
  response: PredictResponse | null = null;
  selectedIndex = 0;
  manualMake: string | null = null;
  manualModel: string | null = null;
  imageName: string | null = null;

  setPredictions(response: PredictResponse, imageName: string | null = null): void {
    this.response = response;
    this.selectedIndex = 0; // top-1 preselected
    this.manualMake = null;
    this.manualModel = null;
    this.imageName = imageName;
  }

  selectRow(index: number): void {
    if (!this.response || index < 0 || index >= this.response.predictions.length) {
      throw new RangeError(`no prediction row ${index}`);
    }
    this.selectedIndex = index;
    this.manualMake = null;
    this.manualModel = null;
  }

  setManual(make: string, model: string): void {
    this.manualMake = make;
    this.manualModel = model;
  }

  get isManual(): boolean {
    return this.manualMake !== null || this.manualModel !== null;
  }

  source(): PredictionSource {
    if (this.isManual) return "manual";
    return this.selectedIndex === 0 ? "accepted_top1" : "accepted_alternative";
  }

  /** Current form values: manual edits win over the selected prediction. */
  fields(): { make: string; model: string } {
    const selected = this.response?.predictions[this.selectedIndex];
    return {
      make: this.manualMake ?? selected?.make ?? "",
      model: this.manualModel ?? selected?.model_name ?? "",
    };
  }

  /** Field-level validation messages; empty object when submittable. */
  validate(): Partial<Record<"make" | "model", string>> {
    const errors: Partial<Record<"make" | "model", string>> = {};
    const { make, model } = this.fields();
    if (!make.trim()) errors.make = "Make is required";
    if (!model.trim()) errors.model = "Model is required";
    return errors;
  }

  draft(): ListingDraft {
    const errors = this.validate();
    if (Object.keys(errors).length > 0) {
      throw new Error("draft is not submittable: " + Object.values(errors).join(", "));
    }
    const { make, model } = this.fields();
    const source = this.source();
    const draft: ListingDraft = { make, model, source };
    if (source !== "manual" && this.response) {
      const selected = this.response.predictions[this.selectedIndex];
      draft.confidence = selected.confidence; // raw payload float
      draft.class_name = selected.class_name;
      draft.model_version = this.response.model_version;
    }
    if (this.imageName) draft.image_name = this.imageName;
    return draft;
  }
}
