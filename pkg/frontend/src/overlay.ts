// Mask overlay rendering: the server's grayscale mask becomes a
// semi-transparent heat tint whose opacity follows the mask value.

export interface OverlayOptions {
  maxAlpha: number; // 0..255 at mask value 255
  tint: [number, number, number];
}

export const DEFAULT_OVERLAY: OverlayOptions = {
  maxAlpha: 140,
  tint: [255, 80, 40],
};

export function maskToOverlay(
  mask: Uint8Array | Uint8ClampedArray | number[],
  width: number,
  height: number,
  options: OverlayOptions = DEFAULT_OVERLAY,
): Uint8ClampedArray {
  if (mask.length !== width * height) {
    throw new Error(`mask length ${mask.length} does not match ${width}x${height}`);
  }
  const out = new Uint8ClampedArray(width * height * 4);
  for (let i = 0; i < mask.length; i++) {
    out[i * 4] = options.tint[0];
    out[i * 4 + 1] = options.tint[1];
    out[i * 4 + 2] = options.tint[2];
    out[i * 4 + 3] = Math.round((mask[i] / 255) * options.maxAlpha);
  }
  return out;
}
