"""One shared draft server, many verifying targets.

Subpackages: ``core`` (models, trees, verification), ``analytics`` (closed-form
throughput model), ``sim`` (discrete-event simulator), ``runtime`` (TCP draft
server and target client), ``cli`` / ``bench`` (command line and loopback
benchmark orchestration).
"""

__version__ = "0.1.0"
