"""Exception hierarchy shared by every layer of the package."""

from __future__ import annotations


class ImsError(Exception):
    pass


# codec
class MalformedMessage(ImsError):
    pass


class InvalidMessage(ImsError):
    pass


# transport
class AddressInUse(ImsError):
    pass


class SendFailed(ImsError):
    pass


# user agent
class Timeout(ImsError):
    pass


class NotRegistered(ImsError):
    pass


class RegistrationFailed(ImsError):
    def __init__(self, code: int, message: str = ""):
        super().__init__(message or f"registration failed with {code}")
        self.code = code


# dsl
class InvalidArgument(ImsError, ValueError):
    pass


class PublishFailed(ImsError):
    def __init__(self, status: int, message: str = ""):
        super().__init__(message or f"publish failed with {status}")
        self.status = status


class AlreadyExists(ImsError):
    pass


class NotFound(ImsError):
    pass


class AlreadyInitialized(ImsError):
    pass


class ConferenceEngineNotReady(ImsError):
    pass


class ConferenceExists(ImsError):
    pass


class ConferenceNotFound(ImsError):
    pass


class ParticipantNotFound(ImsError):
    pass


class InviteFailed(ImsError):
    def __init__(self, code: int, message: str = ""):
        super().__init__(message or f"invite failed with {code}")
        self.code = code


# core
class ChannelClosed(ImsError):
    pass


# trace
class HandshakeMissing(ImsError):
    pass


# interpreter
class ScriptSyntaxError(ImsError):
    def __init__(self, line: int, expected: str, found: str):
        super().__init__(f"line {line}: expected {expected}, found {found}")
        self.line = line
        self.expected = expected
        self.found = found


class UnknownBinding(ImsError):
    def __init__(self, name: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}unknown binding {name!r}")
        self.name = name
        self.line = line


class ScriptRuntimeError(ImsError):
    def __init__(self, line: int, cause: BaseException):
        super().__init__(f"line {line}: {type(cause).__name__}: {cause}")
        self.line = line
        self.cause = cause
