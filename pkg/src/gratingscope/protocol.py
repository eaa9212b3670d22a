"""ASCII command grammar and emulation of the 3-axis stepper controllers.

Wire format: 7-bit ASCII, every command and response terminated by ``/``
with no other framing. Recognized commands, with A in {X, Y, Z} and n an
optionally signed decimal integer::

    ?R/      connect                 A=n/     move absolute
    ?A/      position query          A:n/     move relative
    ?VA/     velocity query          -HMA/    move to negative limit
    VA=n/    set velocity            HMA/     move to positive limit
    ZA/      zero position           S0/      emergency stop (all axes)
    SA/      emergency stop (axis)

Responses mirror the style: ``OK/``, ``A=p/``, ``VA=v/``, ``ERR=NC/``
(not connected), ``ERR=CMD/`` (malformed), ``ERR=ARG/`` (bad argument),
``ERR=LIM/`` (last motion clamped at a travel limit; reported once by the
next position query). Motion is integer-step and constant-velocity,
advanced by :func:`tick`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Union

AXES = ("X", "Y", "Z")

DEFAULT_NEG_LIMIT = -1_000_000
DEFAULT_POS_LIMIT = 1_000_000
DEFAULT_VELOCITY = 1000


class CommandKind(enum.Enum):
    CONNECT = "connect"
    POSITION_QUERY = "position_query"
    VELOCITY_QUERY = "velocity_query"
    SET_VELOCITY = "set_velocity"
    MOVE_ABSOLUTE = "move_absolute"
    MOVE_RELATIVE = "move_relative"
    MOVE_NEG_LIMIT = "move_neg_limit"
    MOVE_POS_LIMIT = "move_pos_limit"
    ZERO_POSITION = "zero_position"
    ESTOP_ALL = "estop_all"
    ESTOP_AXIS = "estop_axis"


_WITH_ARGUMENT = frozenset(
    {CommandKind.SET_VELOCITY, CommandKind.MOVE_ABSOLUTE, CommandKind.MOVE_RELATIVE}
)
_WITHOUT_AXIS = frozenset({CommandKind.CONNECT, CommandKind.ESTOP_ALL})
MOVE_KINDS = frozenset(
    {
        CommandKind.MOVE_ABSOLUTE,
        CommandKind.MOVE_RELATIVE,
        CommandKind.MOVE_NEG_LIMIT,
        CommandKind.MOVE_POS_LIMIT,
    }
)


@dataclass(frozen=True, slots=True)
class Command:
    kind: CommandKind
    axis: Optional[str] = None
    value: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind in _WITHOUT_AXIS:
            if self.axis is not None:
                raise ValueError(f"{self.kind.value} takes no axis")
        elif self.axis not in AXES:
            raise ValueError(f"{self.kind.value} needs an axis in {AXES}")
        if self.kind in _WITH_ARGUMENT:
            if self.value is None:
                raise ValueError(f"{self.kind.value} needs an integer argument")
        elif self.value is not None:
            raise ValueError(f"{self.kind.value} takes no argument")


@dataclass(frozen=True, slots=True)
class ParseFailure:
    position: int
    reason: str


def _parse_int(body: str, start: int) -> Union[int, ParseFailure]:
    i = start
    if i < len(body) and body[i] in "+-":
        i += 1
    digits = i
    while i < len(body) and body[i].isdigit():
        i += 1
    if i == digits:
        return ParseFailure(digits, "expected decimal integer")
    if i != len(body):
        return ParseFailure(i, "trailing bytes after integer")
    return int(body[start:])


def parse_command(data: bytes) -> Union[Command, ParseFailure]:
    """Total parser: any byte string yields a Command or a ParseFailure."""
    if not isinstance(data, (bytes, bytearray)):
        data = bytes(data)
    if not data:
        return ParseFailure(0, "empty command")
    for i, b in enumerate(data):
        if b > 0x7F:
            return ParseFailure(i, "non-ASCII byte")
    text = data.decode("ascii")
    if not text.endswith("/"):
        return ParseFailure(len(text), "missing '/' terminator")
    body = text[:-1]
    if "/" in body:
        return ParseFailure(body.index("/"), "embedded '/' terminator")
    if not body:
        return ParseFailure(0, "empty command")

    head = body[0]
    if head == "?":
        if body == "?R":
            return Command(CommandKind.CONNECT)
        if len(body) == 2 and body[1] in AXES:
            return Command(CommandKind.POSITION_QUERY, body[1])
        if len(body) == 3 and body[1] == "V" and body[2] in AXES:
            return Command(CommandKind.VELOCITY_QUERY, body[2])
        return ParseFailure(1, "unknown query")
    if head == "V":
        if len(body) >= 3 and body[1] in AXES and body[2] == "=":
            value = _parse_int(body, 3)
            if isinstance(value, ParseFailure):
                return value
            return Command(CommandKind.SET_VELOCITY, body[1], value)
        return ParseFailure(1, "expected axis and '=' after 'V'")
    if head == "-":
        if len(body) == 4 and body[1:3] == "HM" and body[3] in AXES:
            return Command(CommandKind.MOVE_NEG_LIMIT, body[3])
        return ParseFailure(1, "expected 'HM<axis>' after '-'")
    if head == "H":
        if len(body) == 3 and body[1] == "M" and body[2] in AXES:
            return Command(CommandKind.MOVE_POS_LIMIT, body[2])
        return ParseFailure(1, "expected 'M<axis>' after 'H'")
    if head == "S":
        if body == "S0":
            return Command(CommandKind.ESTOP_ALL)
        if len(body) == 2 and body[1] in AXES:
            return Command(CommandKind.ESTOP_AXIS, body[1])
        return ParseFailure(1, "expected '0' or axis after 'S'")
    if head == "Z" and len(body) == 2 and body[1] in AXES:
        return Command(CommandKind.ZERO_POSITION, body[1])
    if head in AXES:
        if len(body) >= 2 and body[1] == "=":
            value = _parse_int(body, 2)
            if isinstance(value, ParseFailure):
                return value
            return Command(CommandKind.MOVE_ABSOLUTE, head, value)
        if len(body) >= 2 and body[1] == ":":
            value = _parse_int(body, 2)
            if isinstance(value, ParseFailure):
                return value
            return Command(CommandKind.MOVE_RELATIVE, head, value)
        return ParseFailure(1, "expected '=' or ':' after axis")
    return ParseFailure(0, "unknown command")


def format_command(cmd: Command) -> bytes:
    k = cmd.kind
    if k is CommandKind.CONNECT:
        body = "?R"
    elif k is CommandKind.POSITION_QUERY:
        body = f"?{cmd.axis}"
    elif k is CommandKind.VELOCITY_QUERY:
        body = f"?V{cmd.axis}"
    elif k is CommandKind.SET_VELOCITY:
        body = f"V{cmd.axis}={cmd.value}"
    elif k is CommandKind.MOVE_ABSOLUTE:
        body = f"{cmd.axis}={cmd.value}"
    elif k is CommandKind.MOVE_RELATIVE:
        body = f"{cmd.axis}:{cmd.value}"
    elif k is CommandKind.MOVE_NEG_LIMIT:
        body = f"-HM{cmd.axis}"
    elif k is CommandKind.MOVE_POS_LIMIT:
        body = f"HM{cmd.axis}"
    elif k is CommandKind.ZERO_POSITION:
        body = f"Z{cmd.axis}"
    elif k is CommandKind.ESTOP_ALL:
        body = "S0"
    else:
        body = f"S{cmd.axis}"
    return (body + "/").encode("ascii")


@dataclass(slots=True)
class AxisState:
    position: int = 0
    velocity: int = DEFAULT_VELOCITY       # steps per second, > 0
    moving: bool = False
    target: Optional[int] = None
    neg_limit: int = DEFAULT_NEG_LIMIT
    pos_limit: int = DEFAULT_POS_LIMIT
    zero_offset: int = 0
    estopped: bool = False
    limit_latched: bool = False
    _budget: float = 0.0                   # fractional step carry between ticks

    def clamp(self, target: int) -> int:
        return max(self.neg_limit, min(self.pos_limit, target))


@dataclass(slots=True)
class ControllerState:
    id: int = 1
    axes: dict = field(default_factory=lambda: {a: AxisState() for a in AXES})
    connected: bool = False


def _start_motion(axis: AxisState, physical_target: int, latch_on_clamp: bool) -> None:
    clamped = axis.clamp(physical_target)
    if latch_on_clamp and clamped != physical_target:
        axis.limit_latched = True
    axis.target = clamped
    axis.moving = clamped != axis.position
    axis.estopped = False
    axis._budget = 0.0


def execute(cmd: Command, ctrl: ControllerState) -> tuple[bytes, ControllerState]:
    """Apply one command; returns the response bytes and the controller.

    The controller is mutated in place (and returned for chaining).
    """
    if cmd.kind is CommandKind.CONNECT:
        ctrl.connected = True
        return b"OK/", ctrl
    if not ctrl.connected:
        return b"ERR=NC/", ctrl

    axis = ctrl.axes.get(cmd.axis) if cmd.axis else None
    k = cmd.kind
    if k is CommandKind.POSITION_QUERY:
        if axis.limit_latched:
            axis.limit_latched = False
            return b"ERR=LIM/", ctrl
        return f"{cmd.axis}={axis.position - axis.zero_offset}/".encode(), ctrl
    if k is CommandKind.VELOCITY_QUERY:
        return f"V{cmd.axis}={axis.velocity}/".encode(), ctrl
    if k is CommandKind.SET_VELOCITY:
        if cmd.value <= 0:
            return b"ERR=ARG/", ctrl
        axis.velocity = cmd.value
        return b"OK/", ctrl
    if k is CommandKind.MOVE_ABSOLUTE:
        _start_motion(axis, cmd.value + axis.zero_offset, latch_on_clamp=True)
        return b"OK/", ctrl
    if k is CommandKind.MOVE_RELATIVE:
        _start_motion(axis, axis.position + cmd.value, latch_on_clamp=True)
        return b"OK/", ctrl
    if k is CommandKind.MOVE_NEG_LIMIT:
        _start_motion(axis, axis.neg_limit, latch_on_clamp=False)
        return b"OK/", ctrl
    if k is CommandKind.MOVE_POS_LIMIT:
        _start_motion(axis, axis.pos_limit, latch_on_clamp=False)
        return b"OK/", ctrl
    if k is CommandKind.ZERO_POSITION:
        axis.zero_offset = axis.position
        return b"OK/", ctrl
    if k is CommandKind.ESTOP_AXIS:
        axis.moving = False
        axis.target = None
        axis.estopped = True
        return b"OK/", ctrl
    # ESTOP_ALL
    for a in ctrl.axes.values():
        a.moving = False
        a.target = None
        a.estopped = True
    return b"OK/", ctrl


def tick(ctrl: ControllerState, dt_s: float) -> ControllerState:
    """Advance all moving axes by constant-velocity kinematics."""
    if dt_s < 0:
        raise ValueError("dt must be >= 0")
    for axis in ctrl.axes.values():
        if not axis.moving or axis.estopped or axis.target is None:
            continue
        budget = axis._budget + axis.velocity * dt_s
        whole = int(math.floor(budget))
        remaining = abs(axis.target - axis.position)
        step = min(whole, remaining)
        if step:
            axis.position += step if axis.target > axis.position else -step
        if axis.position == axis.target:
            axis.moving = False
            axis.target = None
            axis._budget = 0.0
        else:
            axis._budget = budget - whole
    return ctrl


class ControllerBank:
    """Eight independent controllers (COM1..COM8 style channels)."""

    def __init__(self, count: int = 8) -> None:
        self.controllers = {i: ControllerState(id=i) for i in range(1, count + 1)}

    def handle_bytes(self, controller_id: int, data: bytes) -> bytes:
        """Execute every '/'-terminated command in ``data``; concatenated replies.

        Bytes after the last terminator are malformed (callers running over a
        stream should buffer and only pass complete commands).
        """
        ctrl = self.controllers[controller_id]
        out = bytearray()
        start = 0
        while True:
            end = data.find(b"/", start)
            if end < 0:
                if start != len(data):
                    out += b"ERR=CMD/"
                break
            token = data[start : end + 1]
            parsed = parse_command(token)
            if isinstance(parsed, ParseFailure):
                out += b"ERR=CMD/"
            else:
                reply, _ = execute(parsed, ctrl)
                out += reply
            start = end + 1
        return bytes(out)

    def tick_all(self, dt_s: float) -> None:
        for ctrl in self.controllers.values():
            tick(ctrl, dt_s)
