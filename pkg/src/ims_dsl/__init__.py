"""Fluent IMS communication DSL over a SIP user agent and a simulated IMS core."""

from .agent import Credentials, RegistrationState, UserAgent
from .config import ProvisioningConfig
from .core import ImsCore, MrfCommand
from .dsl import ConferenceState, HandlerRule, Ims, ServerHandle, UserHandle, first_match
from .errors import *  # noqa: F401,F403
from .sip import (
    RequestType,
    SipMessage,
    SipUri,
    StatusCode,
    make_response,
    parse_message,
    serialize_message,
    transaction_key,
)

__version__ = "0.1.0"
