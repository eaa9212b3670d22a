// Console-state helpers kept pure so they are testable without a DOM.

export interface StageSelection {
  device: number;
  motor_type: string;
  axis: string;
}

export interface StageConfigEntry {
  device: number;
  axis: string;
  motor_type: string;
  steps_per_unit: number;
  unit: string;
}

/** The encoder readout only means something for the piezo stage. */
export function encoderEnabled(selection: StageSelection): boolean {
  return selection.motor_type === "piezo";
}

/** Stage entries matching a partial selection, for the menu rings. */
export function stageChoices(stages: StageConfigEntry[],
                             device?: number, motorType?: string): StageConfigEntry[] {
  return stages.filter((s) =>
    (device === undefined || s.device === device) &&
    (motorType === undefined || s.motor_type === motorType));
}

export function unitFor(stages: StageConfigEntry[], selection: StageSelection): string {
  const match = stages.find((s) =>
    s.device === selection.device && s.motor_type === selection.motor_type &&
    s.axis === selection.axis);
  return match?.unit ?? "";
}

export function displacementForMode(mode: "relative" | "absolute",
                                    value: number): { action: string; value: number } {
  return { action: mode === "relative" ? "move_rel" : "move_abs", value };
}
