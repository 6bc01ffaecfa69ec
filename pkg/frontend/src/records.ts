/** Parsing of shape record text: one point per line, "x y z label". */

import { WireCloud, validateCloud } from './api.js';

export function parseRecordText(text: string, m: number): WireCloud {
  const points: number[] = [];
  const labels: number[] = [];
  const lines = text.split(/\r?\n/);
  for (let i = 0; i < lines.length; i++) {
    const line = lines[i].trim();
    if (line === '') continue;
    const fields = line.split(/\s+/);
    if (fields.length !== 4) {
      throw new Error(`line ${i + 1}: expected "x y z label"`);
    }
    const [x, y, z] = fields.slice(0, 3).map(Number);
    const label = Number(fields[3]);
    if (![x, y, z].every(Number.isFinite) || !Number.isInteger(label)) {
      throw new Error(`line ${i + 1}: malformed numbers`);
    }
    points.push(x, y, z);
    labels.push(label);
  }
  if (labels.length === 0) throw new Error('empty record');
  const cloud: WireCloud = { points, labels, m };
  const problem = validateCloud(cloud);
  if (problem !== null) throw new Error(problem);
  return cloud;
}

export function formatRecordText(cloud: WireCloud): string {
  const lines: string[] = [];
  for (let i = 0; i < cloud.labels.length; i++) {
    lines.push(
      `${cloud.points[3 * i].toFixed(8)} ${cloud.points[3 * i + 1].toFixed(8)} ` +
        `${cloud.points[3 * i + 2].toFixed(8)} ${cloud.labels[i]}`,
    );
  }
  return lines.join('\n') + '\n';
}
