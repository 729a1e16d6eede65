/* tslint:disable */
/* eslint-disable */

export class FitnetDemo {
    free(): void;
    [Symbol.dispose](): void;
    inspect(user_id: number): string;
    constructor(seed: number, n_users: number, epochs: number);
    /**
     * `clicks` is a comma-separated list of item ids.
     */
    recommend(user_id: number, k: number, clicks: string): string;
    sample(user_id: number, setting: number, ratio: number, seed: number): string;
    summary(): string;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_fitnetdemo_free: (a: number, b: number) => void;
    readonly fitnetdemo_inspect: (a: number, b: number) => [number, number, number, number];
    readonly fitnetdemo_new: (a: number, b: number, c: number) => [number, number, number];
    readonly fitnetdemo_recommend: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly fitnetdemo_sample: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly fitnetdemo_summary: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
