/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Synthesizes the template and two identities from `seed`; images are `size`².
     */
    constructor(seed: number, size: number);
    /**
     * JSON statistics of the remeshing at `res`.
     */
    remesh_stats(jaw: number, neck_yaw: number, expression: number, blend: number, res: number): string;
    /**
     * RGBA pixels of the posed head.
     */
    render_pose(jaw: number, neck_yaw: number, expression: number, blend: number, view_yaw: number, weights: boolean): Uint8Array;
    /**
     * RGBA pixels of the posed head remeshed at `res`; statistics via `remesh_stats`.
     */
    render_remesh(jaw: number, neck_yaw: number, expression: number, blend: number, view_yaw: number, res: number): Uint8Array;
    size(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_new: (a: number, b: number) => [number, number, number];
    readonly demo_remesh_stats: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly demo_render_pose: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly demo_render_remesh: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly demo_size: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
