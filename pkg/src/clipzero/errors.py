"""Exception hierarchy shared by every clipzero module."""

from __future__ import annotations


class ClipZeroError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ClipZeroError, ValueError):
    pass


class ContractError(ClipZeroError, ValueError):
    """An operation was called outside its precondition (shape, length, ...)."""


class LoadError(ClipZeroError):
    """A dataset or resource file could not be parsed.

    ``location`` names the offending record: a question id, a line number or
    a record offset, depending on the file format.
    """

    def __init__(self, message: str, path: str | None = None, location: object = None):
        self.path = path
        self.location = location
        parts = [message]
        if path is not None:
            parts.append(f"file={path}")
        if location is not None:
            parts.append(f"at={location}")
        super().__init__(" ".join(parts))


class ConfigError(ClipZeroError, ValueError):
    pass


class TemplateError(ClipZeroError):
    """Base for template generation failures."""


class GenerationError(TemplateError):
    """The infilling LM returned no usable template."""


class UnsupportedQuestionError(TemplateError):
    pass


class ConversionError(TemplateError):
    """Rule application produced zero or several answer slots."""


class NoTemplateError(TemplateError):
    pass


class YesNoGenerationError(TemplateError):
    pass


class AssemblyError(ClipZeroError):
    pass


class TaggingError(ClipZeroError):
    """A parameter has no kind tag; nothing is made trainable."""


class NonFiniteLossError(ClipZeroError, FloatingPointError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(f"{message} {self.diagnostics}" if diagnostics else message)
