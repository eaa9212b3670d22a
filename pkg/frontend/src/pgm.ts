// Binary PGM (P5) parser for the service's preview images.

export interface GrayImage {
  width: number;
  height: number;
  pixels: Uint8Array;
}

export function parsePgm(buffer: ArrayBuffer): GrayImage {
  const bytes = new Uint8Array(buffer);
  // header: "P5\n<w> <h>\n<maxval>\n" with arbitrary whitespace
  let pos = 0;
  const tokens: string[] = [];
  while (tokens.length < 4 && pos < bytes.length) {
    while (pos < bytes.length && /\s/.test(String.fromCharCode(bytes[pos]))) pos++;
    if (String.fromCharCode(bytes[pos]) === "#") {
      while (pos < bytes.length && bytes[pos] !== 0x0a) pos++;
      continue;
    }
    let token = "";
    while (pos < bytes.length && !/\s/.test(String.fromCharCode(bytes[pos]))) {
      token += String.fromCharCode(bytes[pos]);
      pos++;
    }
    tokens.push(token);
  }
  pos++; // single whitespace after maxval
  const [magic, w, h, maxval] = tokens;
  if (magic !== "P5") throw new Error(`not a binary PGM: magic ${magic}`);
  if (maxval !== "255") throw new Error(`unsupported maxval ${maxval}`);
  const width = parseInt(w, 10);
  const height = parseInt(h, 10);
  const pixels = bytes.slice(pos, pos + width * height);
  if (pixels.length !== width * height) {
    throw new Error(`PGM truncated: ${pixels.length} of ${width * height} bytes`);
  }
  return { width, height, pixels };
}

/** Re-window an 8-bit image by percentiles for brightness/contrast sliders. */
export function windowU8(image: GrayImage, loPct: number, hiPct: number): GrayImage {
  const sorted = Array.from(image.pixels).sort((a, b) => a - b);
  const pick = (pct: number) =>
    sorted[Math.min(sorted.length - 1, Math.max(0, Math.round((pct / 100) * (sorted.length - 1))))];
  const lo = pick(loPct);
  const hi = pick(hiPct);
  const out = new Uint8Array(image.pixels.length);
  if (hi <= lo) {
    out.fill(128);
  } else {
    image.pixels.forEach((v, i) => {
      out[i] = Math.max(0, Math.min(255, Math.round(((v - lo) / (hi - lo)) * 255)));
    });
  }
  return { width: image.width, height: image.height, pixels: out };
}

export function drawGray(canvas: HTMLCanvasElement, image: GrayImage, scale = 1): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  canvas.width = image.width * scale;
  canvas.height = image.height * scale;
  const rgba = new Uint8ClampedArray(image.width * image.height * 4);
  image.pixels.forEach((v, i) => {
    rgba[4 * i] = rgba[4 * i + 1] = rgba[4 * i + 2] = v;
    rgba[4 * i + 3] = 255;
  });
  const imageData = new ImageData(rgba, image.width, image.height);
  if (scale === 1) {
    ctx.putImageData(imageData, 0, 0);
    return;
  }
  const off = document.createElement("canvas");
  off.width = image.width;
  off.height = image.height;
  off.getContext("2d")!.putImageData(imageData, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
}
