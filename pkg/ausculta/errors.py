"""
Exception hierarchy for the toolkit. Each family carries the CLI exit code it maps to:
1 = configuration error, 2 = data error, 3 = numeric failure.
"""
from __future__ import annotations


class AuscultaError(Exception):
    """Base class; `exit_code` is what `ausculta` returns when this escapes a command."""

    exit_code = 2


class ConfigError(AuscultaError):
    exit_code = 1


class DataError(AuscultaError, ValueError):
    exit_code = 2


class NumericError(AuscultaError, ArithmeticError):
    exit_code = 3


# --- configuration ---

class InvalidFrequencyRange(ConfigError):
    pass


class BatchSizeTooSmall(ConfigError):
    pass


class UnknownTask(ConfigError):
    pass


# --- audio / features ---

class MalformedContainer(DataError):
    pass


class UnsupportedEncoding(DataError):
    pass


class EmptyAudio(DataError):
    pass


class ClipTooShort(DataError):
    pass


# --- corpus / manifests ---

class ManifestError(DataError):
    """Schema violation in a manifest line; message carries `path:line`."""


class DuplicateRecordId(ManifestError):
    pass


class UnknownDatasetId(ManifestError):
    pass


class MissingAudioFile(DataError):
    pass


# --- labels / tasks ---

class LabelOutOfRange(DataError):
    pass


class NonIntegerCount(LabelOutOfRange):
    pass


class NoLabeledData(DataError):
    pass


# --- tensors ---

class DimMismatch(DataError):
    pass


class NonFiniteActivation(NumericError):
    pass


class NonFiniteGradient(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass


# --- metrics / ranking ---

class EmptyEvaluation(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class SingleClassOnly(DataError):
    pass


class IncompleteColumn(DataError):
    pass


class EmptyGroup(DataError):
    pass


class ScoresSchemaError(DataError):
    pass
