"""Exception taxonomy shared across the package.

Each error family maps to a distinct failure mode so callers (CLI,
service, tests) can react without string matching.
"""

from __future__ import annotations


class GratingscopeError(Exception):
    """Base class for all package errors."""


class InvalidGeometryError(GratingscopeError):
    """Geometry input is malformed (non-positive / non-finite / wrong arity).

    Distinct from a geometry *violation*, which is a well-formed setup that
    fails the matching condition and is reported as a value, not an error.
    """


class PiezoRangeError(GratingscopeError):
    """Piezo move target outside the configured travel range."""


class TubeLimitError(GratingscopeError):
    """Tube setting outside the configured safety bounds."""


class DetectorConfigError(GratingscopeError):
    """Detector configuration violates an invariant (binning, gain, ...)."""


class PhantomError(GratingscopeError):
    """Phantom grids out of range or dimensionally inconsistent."""


class ScanError(GratingscopeError):
    """Scan cannot run (bad config, tube off, piezo not homed)."""


class ScanAborted(GratingscopeError):
    """Scan stopped before completion; partial dataset was persisted."""


class DatasetError(GratingscopeError):
    """Base class for dataset persistence failures."""


class ManifestError(DatasetError):
    """Manifest file missing, unreadable or structurally corrupt."""


class FrameTruncatedError(DatasetError):
    """A raw frame file is shorter (or longer) than the manifest promises."""


class ChecksumError(DatasetError):
    """CRC32 recorded in the manifest does not match the raw bytes."""


class DatasetConsistencyError(DatasetError):
    """Manifest frame count disagrees with the records or files present."""


class NoFringeError(GratingscopeError):
    """Stepping curve carries no usable modulation (likely misalignment)."""


class RetrievalInputError(GratingscopeError):
    """Sample/reference datasets are incompatible or the ROI is invalid."""


class CalibrationConfigError(GratingscopeError):
    """Drift-calibration margin overlaps the declared sample region."""


class ConfigError(GratingscopeError):
    """System configuration file is invalid."""


class AuthError(GratingscopeError):
    """Login rejected or session token invalid/expired."""


class RateLimitedError(AuthError):
    """Too many failed logins; retry after the cooldown."""


class AddressError(GratingscopeError):
    """Stage address does not resolve to exactly one configured stage."""


class InterlockError(GratingscopeError):
    """Motion command refused because a scan is running."""


class BusyError(GratingscopeError):
    """Another scan (or exclusive operation) is already running."""


class ControlHeldError(GratingscopeError):
    """Device control is held by a different session."""


class DeviceError(GratingscopeError):
    """A device replied with an error status."""
