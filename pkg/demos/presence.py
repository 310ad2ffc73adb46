"""A caregiver watches a patient's presence document and is told about new readings."""

from __future__ import annotations

from pathlib import Path

from ims_dsl import Ims, ProvisioningConfig, RequestType

CONFIG = Path(__file__).resolve().parent.parent / "scenarios" / "presence.json"


def main() -> None:
    ims = Ims.simulated(ProvisioningConfig.load(CONFIG))
    patient = ims.user().has_credentials("alice", "ims.test", "alice-pw")
    caregiver = ims.user().has_credentials("carol", "ims.test", "carol-pw")
    caregiver.on_receive(RequestType.NOTIFY).do(
        lambda note: print(f"carol notified: {note.body_text}"))
    caregiver.new_contact_list("patients")
    caregiver.add_contact(patient)
    caregiver.add(patient).to("patients")

    patient.publish("<hr>72</hr>").as_("vitals")
    ims.settle()
    print("document:", ims.core_client.xcap_get(patient.uri)[1])
    print("contacts:", caregiver.contact_book())
    ims.close()


if __name__ == "__main__":
    main()
