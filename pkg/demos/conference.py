"""A bridged call turns into a three-way conference when a party dials a number.

alice calls bob through the conference server, which bridges the call
back-to-back. alice then keys ``#5145551234#`` as DTMF; the server moves
both legs onto its conference bridge and invites carol. Finally alice and
bob hang up, which tears the conference down again.
"""

from __future__ import annotations

from pathlib import Path

from ims_dsl import Ims, ProvisioningConfig, RequestType
from ims_dsl.apps import install_conference_server

CONFIG = Path(__file__).resolve().parent.parent / "scenarios" / "conference.json"
DOMAIN = "ims.server.ericsson.com"
DIALED = "#5145551234#"


def run(ims: Ims, hang_up: bool = True):
    server = ims.server().has_credentials("15148500002", DOMAIN, "server-pw")
    server.supporting_conference()
    install_conference_server(server)
    alice = ims.user().has_credentials("15141234567", DOMAIN, "alice-pw")
    bob = ims.user().has_credentials("15141234568", DOMAIN, "bob-pw")
    carol = ims.user().has_credentials("5145551234", DOMAIN, "carol-pw")

    alice.send_request(RequestType.INVITE).to(bob).wait()
    for key in DIALED:
        alice.send_request(RequestType.INFO) \
            .with_content_type("application/dtmf-relay") \
            .with_body(f"Signal={key}") \
            .to(bob).wait()
    if hang_up:
        alice.send_request(RequestType.BYE).to(server).wait()
        bob.send_request(RequestType.BYE).to(server).wait()
    return server, (alice, bob, carol)


def main() -> None:
    ims = Ims.simulated(ProvisioningConfig.load(CONFIG))
    server, _ = run(ims, hang_up=False)
    for conf in server.conferences.values():
        print(f"conference {conf.conference_uri}:")
        for uri, call_id in conf.participants:
            print(f"  {uri}  (call {call_id})")
    for command in ims.core.journal:
        print(command.line())
    ims.close()


if __name__ == "__main__":
    main()
