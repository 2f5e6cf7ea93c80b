"""OAuth-based provisioning of Plug and Charge contract credentials.

Actors: the EMSP's authorization server (:mod:`.authserver`) and resource
server (:mod:`.resourceserver`), the vehicle (:mod:`.vehicle`), the driver's
user agent (:mod:`.useragent`) and the charge point (:mod:`.chargepoint`).
:mod:`.sim` runs them together on a virtual clock with an active network
adversary and checks the recorded traces.
"""

__version__ = "0.1.0"
