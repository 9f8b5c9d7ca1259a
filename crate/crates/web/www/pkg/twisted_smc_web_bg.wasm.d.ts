/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const log_z_spread_json: (a: number, b: number, c: number, d: number, e: number) => [number, number];
export const track_json: (a: number, b: number, c: number, d: number, e: number) => [number, number];
export const twist_profile_json: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
