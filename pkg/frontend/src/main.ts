/** Editor wiring: two session slots, part selection, edit controls, history. */

import { ApiClient, ConstraintMap, WireCloud } from './api.js';
import { buildColorBuffer, partColor } from './colors.js';
import { cloudsEqual, replayEntry } from './history.js';
import { parseRecordText } from './records.js';
import { CloudView } from './render.js';
import { EditorStore } from './state.js';

const params = new URLSearchParams(window.location.search);
const api = new ApiClient(params.get('api') ?? '/api');
const store = new EditorStore(api, Number(params.get('seed') ?? 1));

const el = <T extends HTMLElement>(id: string) => document.getElementById(id) as T;

function h<K extends keyof HTMLElementTagNameMap>(
  tag: K, attrs: Record<string, string> = {}, text = '',
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text) node.textContent = text;
  return node;
}

let view: CloudView;
const donorChoice: Map<number, number> = new Map(); // part -> slot index

function currentCloud(): WireCloud | null {
  const key = store.state.displayed;
  return key ? store.state.clouds.get(key) ?? null : null;
}

function redraw() {
  const cloud = currentCloud();
  if (cloud && view) {
    view.updateCloud(cloud, buildColorBuffer(cloud.labels, store.state.selected));
  }
}

function renderParts() {
  const meta = store.state.meta;
  if (!meta) return;
  const list = el<HTMLDivElement>('parts');
  list.replaceChildren();
  for (let j = 0; j < meta.m; j++) {
    const row = h('div', { class: 'part-row' });
    const check = h('input', { type: 'checkbox', id: `sel-${j}` }) as HTMLInputElement;
    check.checked = store.state.selected.has(j);
    check.onchange = () => {
      store.toggleSelection(j);
      redraw();
    };
    const [r, g, b] = partColor(j).map((v) => Math.round(v * 255));
    const swatch = h('span', { class: 'swatch', style: `background: rgb(${r},${g},${b})` });
    row.append(check, swatch, h('label', { for: `sel-${j}` }, meta.part_names[j] ?? `part ${j}`));
    for (const slot of [0, 1]) {
      const radio = h('input', {
        type: 'radio', name: `donor-${j}`, title: `donor slot ${slot === 0 ? 'A' : 'B'}`,
      }) as HTMLInputElement;
      radio.checked = (donorChoice.get(j) ?? 0) === slot;
      radio.onchange = () => donorChoice.set(j, slot);
      row.append(radio, h('span', {}, slot === 0 ? 'A' : 'B'));
    }
    list.append(row);
  }
}

function renderHistory() {
  const list = el<HTMLDivElement>('history');
  list.replaceChildren();
  for (const entry of [...store.state.history].reverse()) {
    const row = h('div', { class: 'history-row' });
    row.append(h('span', {}, `#${entry.id} ${entry.op.kind} seed=${entry.seed}`));
    const btn = h('button', {}, 'replay');
    btn.onclick = async () => {
      try {
        const result = await replayEntry(api, entry);
        const original = store.state.clouds.get(entry.resultKey);
        const replayed = Array.isArray(result) ? result[0] : result;
        if (original && cloudsEqual(original, replayed)) {
          store.notice(`replay #${entry.id}: identical cloud`);
        } else {
          store.notice(`replay #${entry.id}: MISMATCH`);
        }
        store.storeCloud(entry.resultKey, replayed);
        redraw();
      } catch (err) {
        store.notice(String(err));
      }
    };
    row.append(btn);
    list.append(row);
  }
}

function renderStatus() {
  el<HTMLSpanElement>('status').textContent = store.state.pending
    ? `working: ${store.state.pending}...`
    : 'idle';
  el<HTMLSpanElement>('notice').textContent = store.state.notice ?? '';
  el<HTMLSpanElement>('residual').textContent = store.state.lastResidual !== null
    ? `residual ${store.state.lastResidual.toExponential(2)}`
    : '';
  const busy = store.state.pending !== null;
  document.querySelectorAll('button').forEach((b) => {
    (b as HTMLButtonElement).disabled = busy;
  });
}

function slotSession(slot: number): string | null {
  return store.state.slots[slot]?.sessionId ?? null;
}

async function generateInto(slot: number) {
  const seed = store.nextSeed();
  try {
    const clouds = await api.generate(1, seed);
    await store.openSession(slot, clouds[0], `generated seed=${seed}`);
    store.notice(`slot ${slot === 0 ? 'A' : 'B'} <- generated shape (seed ${seed})`);
    redraw();
  } catch (err) {
    store.notice(String(err));
  }
}

async function loadFileInto(slot: number, file: File) {
  const meta = store.state.meta;
  if (!meta) return;
  try {
    const cloud = parseRecordText(await file.text(), meta.m);
    await store.openSession(slot, cloud, file.name);
    store.notice(`slot ${slot === 0 ? 'A' : 'B'} <- ${file.name}`);
    redraw();
  } catch (err) {
    store.notice(String(err));
  }
}

function transformConstraints(): ConstraintMap {
  const constraints: ConstraintMap = {};
  const axes = ['x', 'y', 'z'];
  for (const part of store.state.selected) {
    const shift: (number | null)[] = [null, null, null];
    const scale: (number | null)[] = [null, null, null];
    axes.forEach((axis, i) => {
      if (el<HTMLInputElement>(`set-shift-${axis}`).checked) {
        shift[i] = Number(el<HTMLInputElement>(`shift-${axis}`).value);
      }
      if (el<HTMLInputElement>(`set-scale-${axis}`).checked) {
        scale[i] = Math.pow(10, Number(el<HTMLInputElement>(`scale-${axis}`).value));
      }
    });
    constraints[String(part)] = { shift, scale };
  }
  return constraints;
}

async function init() {
  view = new CloudView(el<HTMLDivElement>('viewport'));
  try {
    await store.loadMeta();
  } catch (err) {
    store.notice(`service unavailable: ${String(err)}`);
    return;
  }
  renderParts();

  el<HTMLButtonElement>('gen-a').onclick = () => generateInto(0);
  el<HTMLButtonElement>('gen-b').onclick = () => generateInto(1);
  el<HTMLInputElement>('file-a').onchange = (e) => {
    const f = (e.target as HTMLInputElement).files?.[0];
    if (f) loadFileInto(0, f);
  };
  el<HTMLInputElement>('file-b').onchange = (e) => {
    const f = (e.target as HTMLInputElement).files?.[0];
    if (f) loadFileInto(1, f);
  };

  el<HTMLButtonElement>('resample').onclick = async () => {
    const sid = slotSession(0);
    if (!sid) return store.notice('open a session in slot A first');
    await store.dispatch({ kind: 'resample', sessionId: sid, parts: [...store.state.selected] });
    redraw();
  };

  el<HTMLButtonElement>('mix').onclick = async () => {
    const a = slotSession(0);
    const b = slotSession(1);
    if (!a || !b) return store.notice('mixing needs sessions in both slots');
    const meta = store.state.meta!;
    const assignment: Record<string, number> = {};
    for (let j = 0; j < meta.m; j++) assignment[String(j)] = donorChoice.get(j) ?? 0;
    await store.dispatch({ kind: 'mix', sessionId: a, donorSessionIds: [b], assignment });
    redraw();
  };

  el<HTMLButtonElement>('interpolate').onclick = async () => {
    const a = slotSession(0);
    const b = slotSession(1);
    if (!a || !b) return store.notice('interpolation needs sessions in both slots');
    const part = [...store.state.selected][0];
    if (part === undefined) return store.notice('select the part to interpolate');
    const steps = Number(el<HTMLInputElement>('interp-steps').value);
    await store.dispatch({ kind: 'interpolate', sessionId: a, part, targetSession: b, steps });
    const slider = el<HTMLInputElement>('interp-slider');
    slider.max = String(store.state.interpFrames.length - 1);
    slider.value = '0';
    redraw();
  };

  el<HTMLInputElement>('interp-slider').oninput = (e) => {
    store.scrubInterpolation(Number((e.target as HTMLInputElement).value));
    redraw();
  };

  el<HTMLButtonElement>('apply-transform').onclick = async () => {
    const sid = slotSession(0);
    if (!sid) return store.notice('open a session in slot A first');
    if (store.state.selected.size === 0) return store.notice('select the part(s) to edit');
    await store.dispatch({ kind: 'transform', sessionId: sid, constraints: transformConstraints() });
    redraw();
  };

  store.subscribe(() => {
    renderStatus();
    renderHistory();
  });
  renderStatus();
}

init();
