/** Part color assignments and per-point color buffers. Pure functions, no GL. */

const PALETTE: [number, number, number][] = [
  [0.91, 0.30, 0.24], // red
  [0.18, 0.55, 0.86], // blue
  [0.20, 0.72, 0.40], // green
  [0.95, 0.64, 0.15], // orange
  [0.61, 0.35, 0.82], // purple
  [0.10, 0.70, 0.70], // teal
  [0.86, 0.40, 0.65], // pink
  [0.55, 0.55, 0.20], // olive
];

const HIGHLIGHT: [number, number, number] = [1.0, 0.92, 0.25];

export function partColor(part: number): [number, number, number] {
  return PALETTE[part % PALETTE.length];
}

/** Flat RGB buffer (3 per point): selected parts get the highlight color, the
 * rest their palette color. Exactly the points labeled with a selected part
 * change when the selection changes. */
export function buildColorBuffer(labels: number[], selected: Set<number>): Float32Array {
  const out = new Float32Array(labels.length * 3);
  for (let i = 0; i < labels.length; i++) {
    const c = selected.has(labels[i]) ? HIGHLIGHT : partColor(labels[i]);
    out[3 * i] = c[0];
    out[3 * i + 1] = c[1];
    out[3 * i + 2] = c[2];
  }
  return out;
}
