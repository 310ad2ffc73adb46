"""Two users register and exchange a greeting, written against the embedded API.

Run with ``python3 demos/hello.py``; prints the Mermaid diagram of the exchange.
The script ``scenarios/hello.ims`` drives exactly the same traffic.
"""

from __future__ import annotations

from pathlib import Path

from ims_dsl import Ims, ProvisioningConfig, RequestType, StatusCode
from ims_dsl.trace import emit_diagram, group

CONFIG = Path(__file__).resolve().parent.parent / "scenarios" / "hello.json"


def run(ims: Ims):
    alice = ims.user().has_credentials("alice", "ims.test", "alice-pw")
    bob = ims.user().has_credentials("bob", "ims.test", "bob-pw")
    bob.on_receive(RequestType.MESSAGE).with_content_type("text/plain").do(
        lambda request: bob.send_status(StatusCode.OK).in_response_to(request))
    sent = alice.send("Hello World").to("sip:bob@ims.test")
    sent.wait()
    return alice, bob, sent


def main() -> None:
    ims = Ims.simulated(ProvisioningConfig.load(CONFIG))
    alice, bob, sent = run(ims)
    ims.settle()
    print(f"bob saw: {bob.requests_received(RequestType.MESSAGE)[0].body_text!r}")
    print(f"alice got: {sent.final.status}")
    print(emit_diagram(group(ims.tracer.events)))
    ims.close()


if __name__ == "__main__":
    main()
