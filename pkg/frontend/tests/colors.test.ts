import { describe, expect, it } from 'vitest';

import { buildColorBuffer, partColor } from '../src/colors.js';

describe('part coloring', () => {
  it('single-label cloud renders in one color', () => {
    const buf = buildColorBuffer([0, 0, 0], new Set());
    const [r, g, b] = partColor(0);
    for (let i = 0; i < 3; i++) {
      expect(buf[3 * i]).toBeCloseTo(r);
      expect(buf[3 * i + 1]).toBeCloseTo(g);
      expect(buf[3 * i + 2]).toBeCloseTo(b);
    }
  });

  it('toggling a selection recolors exactly the points with that label', () => {
    const labels = [0, 2, 1, 2, 0, 2];
    const plain = buildColorBuffer(labels, new Set());
    const highlighted = buildColorBuffer(labels, new Set([2]));
    labels.forEach((label, i) => {
      const changed =
        plain[3 * i] !== highlighted[3 * i] ||
        plain[3 * i + 1] !== highlighted[3 * i + 1] ||
        plain[3 * i + 2] !== highlighted[3 * i + 2];
      expect(changed).toBe(label === 2);
    });
  });

  it('supports up to eight distinct part colors', () => {
    const seen = new Set<string>();
    for (let j = 0; j < 8; j++) seen.add(partColor(j).join(','));
    expect(seen.size).toBe(8);
  });
});
