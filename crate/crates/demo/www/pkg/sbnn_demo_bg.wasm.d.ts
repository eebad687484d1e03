/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const budget: (a: number, b: number) => [number, number, number, number];
export const entropy_curve: (a: number) => [number, number];
export const fit_omega: (a: number, b: number) => [number, number, number, number];
export const kernel_histogram: (a: number, b: number) => [number, number, number, number];
export const kernel_summary: (a: number, b: number) => [number, number, number, number];
export const random_kernels: (a: number, b: number, c: bigint) => [number, number];
export const sample_weights: (a: number, b: number, c: number, d: bigint) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
