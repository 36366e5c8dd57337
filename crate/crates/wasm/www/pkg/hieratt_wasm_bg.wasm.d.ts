/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_ggsademo_free: (a: number, b: number) => void;
export const effectiveSizes: (a: number, b: number, c: number, d: number) => [number, number];
export const ggsademo_attentionRow: (a: number, b: number, c: number) => [number, number];
export const ggsademo_grid: (a: number) => number;
export const ggsademo_new: (a: number, b: number, c: bigint) => [number, number, number];
export const ggsademo_rgba: (a: number) => [number, number];
export const ggsademo_size: (a: number) => number;
export const gridMap: (a: number, b: number, c: number) => [number, number, number, number];
export const macCurves: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const windowMap: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
