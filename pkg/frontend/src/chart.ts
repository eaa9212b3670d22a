// Shift-curve chart: a pure model fed by stream events, and a canvas
// renderer. The model records anomalies (out-of-order or duplicated
// points) instead of silently accepting them, so tests and the status bar
// can prove stream continuity.

export interface CurvePoint {
  scan_id: string;
  arm: string;
  step: number;
  piezo_um: number;
  mean: number;
}

const ARM_COLORS: Record<string, string> = {
  reference: "#4cc2ff",
  sample: "#ffb454",
};

export class ShiftCurveModel {
  scanId: string | null = null;
  arms = new Map<string, CurvePoint[]>();
  anomalies: string[] = [];

  /** Start collecting a new scan; points from other scans are ignored. */
  reset(scanId: string | null = null): void {
    this.scanId = scanId;
    this.arms.clear();
    this.anomalies = [];
  }

  addPoint(point: CurvePoint): boolean {
    if (this.scanId === null) this.scanId = point.scan_id;
    if (point.scan_id !== this.scanId) return false;
    let points = this.arms.get(point.arm);
    if (!points) {
      points = [];
      this.arms.set(point.arm, points);
    }
    const expected = points.length;
    if (point.step < expected) {
      this.anomalies.push(`${point.arm} step ${point.step} duplicated`);
      return false;
    }
    if (point.step > expected) {
      this.anomalies.push(`${point.arm} step ${point.step} arrived, expected ${expected}`);
    }
    points.push(point);
    return true;
  }

  pointCount(arm: string): number {
    return this.arms.get(arm)?.length ?? 0;
  }

  steps(arm: string): number[] {
    return (this.arms.get(arm) ?? []).map((p) => p.step);
  }

  isComplete(stepsPerArm: number, arms = ["reference", "sample"]): boolean {
    return arms.every((arm) => this.pointCount(arm) === stepsPerArm);
  }
}

export function drawShiftCurve(canvas: HTMLCanvasElement, model: ShiftCurveModel,
                               totalSteps: number): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const { width, height } = canvas;
  ctx.fillStyle = "#10141a";
  ctx.fillRect(0, 0, width, height);

  let lo = Infinity;
  let hi = -Infinity;
  for (const points of model.arms.values()) {
    for (const p of points) {
      lo = Math.min(lo, p.mean);
      hi = Math.max(hi, p.mean);
    }
  }
  if (!isFinite(lo) || hi <= lo) return;
  const pad = 28;
  const sx = (step: number) => pad + (step / Math.max(totalSteps - 1, 1)) * (width - 2 * pad);
  const sy = (mean: number) => height - pad - ((mean - lo) / (hi - lo)) * (height - 2 * pad);

  ctx.strokeStyle = "#2a3442";
  ctx.strokeRect(pad, pad, width - 2 * pad, height - 2 * pad);
  ctx.fillStyle = "#8fa3bb";
  ctx.font = "10px sans-serif";
  ctx.fillText(hi.toFixed(1), 2, pad + 4);
  ctx.fillText(lo.toFixed(1), 2, height - pad);

  for (const [arm, points] of model.arms) {
    ctx.strokeStyle = ARM_COLORS[arm] ?? "#cccccc";
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    points.forEach((p, i) => {
      const x = sx(p.step);
      const y = sy(p.mean);
      if (i === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    });
    ctx.stroke();
    ctx.fillStyle = ctx.strokeStyle;
    for (const p of points) ctx.fillRect(sx(p.step) - 1.5, sy(p.mean) - 1.5, 3, 3);
  }
}
