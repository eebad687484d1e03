/* tslint:disable */
/* eslint-disable */

/**
 * `[p*, M, ec, gain]` for a bits-per-weight target over `n` weights.
 */
export function budget(h_star: number, n: number): Float64Array;

/**
 * `h(p)` at `points` evenly spaced `p` in `[0, 1]`.
 */
export function entropy_curve(points: number): Float64Array;

/**
 * Closed-form domain of `weights` binarized by sign:
 * `[tau, phi, alpha, beta, p, loss]`.
 */
export function fit_omega(weights: Float64Array): Float64Array;

/**
 * Fraction of kernels with Hamming weight 0..=9.
 */
export function kernel_histogram(bits: Uint8Array): Float64Array;

/**
 * `[bparams_bits, bparams_pr, k0, k1, kdense, ones_fraction, gain]`.
 */
export function kernel_summary(bits: Uint8Array): Float64Array;

/**
 * `kernels` random 3x3 kernels whose bits are 1 with probability `density`.
 */
export function random_kernels(kernels: number, density: number, seed: bigint): Uint8Array;

/**
 * `count` seeded samples from `N(mean, std)` via Box-Muller.
 */
export function sample_weights(count: number, mean: number, std: number, seed: bigint): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly budget: (a: number, b: number) => [number, number, number, number];
    readonly entropy_curve: (a: number) => [number, number];
    readonly fit_omega: (a: number, b: number) => [number, number, number, number];
    readonly kernel_histogram: (a: number, b: number) => [number, number, number, number];
    readonly kernel_summary: (a: number, b: number) => [number, number, number, number];
    readonly random_kernels: (a: number, b: number, c: bigint) => [number, number];
    readonly sample_weights: (a: number, b: number, c: number, d: bigint) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
