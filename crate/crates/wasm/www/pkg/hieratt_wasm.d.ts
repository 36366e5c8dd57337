/* tslint:disable */
/* eslint-disable */

/**
 * A random grid-attention layer applied to a synthetic picture, kept so
 * that attention rows can be queried interactively.
 */
export class GgsaDemo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Attention weights from pixel `(y, x)` to every pixel, averaged over
     * heads; zero outside the query's grid group.
     */
    attentionRow(y: number, x: number): Float64Array;
    grid(): number;
    constructor(size: number, grid: number, seed: bigint);
    /**
     * RGBA bytes of the input picture.
     */
    rgba(): Uint8Array;
    size(): number;
}

/**
 * Window and grid sizes actually used at `h×w`: `[window, grid]`.
 */
export function effectiveSizes(h: number, w: number, window: number, grid: number): Uint32Array;

export function gridMap(h: number, w: number, grid: number): Uint32Array;

export function macCurves(preset: string, sides: Uint32Array): Float64Array;

export function windowMap(h: number, w: number, window: number, shift: number): Uint32Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_ggsademo_free: (a: number, b: number) => void;
    readonly effectiveSizes: (a: number, b: number, c: number, d: number) => [number, number];
    readonly ggsademo_attentionRow: (a: number, b: number, c: number) => [number, number];
    readonly ggsademo_grid: (a: number) => number;
    readonly ggsademo_new: (a: number, b: number, c: bigint) => [number, number, number];
    readonly ggsademo_rgba: (a: number) => [number, number];
    readonly ggsademo_size: (a: number) => number;
    readonly gridMap: (a: number, b: number, c: number) => [number, number, number, number];
    readonly macCurves: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly windowMap: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
