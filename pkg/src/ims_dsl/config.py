"""Provisioning configuration shared by the core, the DSL and the CLI."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

DEFAULT_DTMF_CONTENT_TYPE = "application/dtmf-relay"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProvisionedUser:
    username: str
    password: str
    domain: str


@dataclass(frozen=True)
class ProvisioningConfig:
    domain: str
    users: tuple[ProvisionedUser, ...]
    expiry_seconds: int = 3600
    conference_server: str = ""
    default_domain: str = ""
    dtmf_content_type: str = DEFAULT_DTMF_CONTENT_TYPE
    seed: int = 0
    refresh: bool = True

    def __post_init__(self):
        if not self.default_domain:
            object.__setattr__(self, "default_domain", self.domain)
        seen = set()
        for user in self.users:
            key = (user.username, user.domain)
            if key in seen:
                raise ConfigError(f"duplicate provisioned user {user.username}@{user.domain}")
            seen.add(key)

    @classmethod
    def from_dict(cls, data: dict) -> ProvisioningConfig:
        if not isinstance(data, dict):
            raise ConfigError("provisioning config must be a JSON object")
        domain = data.get("domain")
        if not isinstance(domain, str) or not domain:
            raise ConfigError("missing or empty field 'domain'")
        users = data.get("users")
        if not isinstance(users, list) or not users:
            raise ConfigError("field 'users' must be a non-empty array")
        parsed = []
        for i, entry in enumerate(users):
            try:
                parsed.append(ProvisionedUser(str(entry["username"]), str(entry["password"]),
                                              str(entry.get("domain", domain))))
            except (KeyError, TypeError):
                raise ConfigError(f"users[{i}] needs 'username' and 'password'") from None
        expiry = data.get("expiry_seconds", 3600)
        if not isinstance(expiry, int) or expiry <= 0:
            raise ConfigError("field 'expiry_seconds' must be a positive integer")
        return cls(
            domain=domain,
            users=tuple(parsed),
            expiry_seconds=expiry,
            conference_server=data.get("conference_server", "") or "",
            default_domain=data.get("default_domain", "") or "",
            dtmf_content_type=data.get("dtmf_content_type", DEFAULT_DTMF_CONTENT_TYPE),
            seed=int(data.get("seed", 0)),
            refresh=bool(data.get("refresh", True)),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> ProvisioningConfig:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def with_overrides(self, **changes) -> ProvisioningConfig:
        from dataclasses import replace
        return replace(self, **changes)
