/** Display form of a confidence: percentage with one decimal. */
export function formatPercent(confidence: number): string {
  return `${(confidence * 100).toFixed(1)}%`;
}
