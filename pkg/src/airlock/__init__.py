"""Secure data airlock and compliance control plane.

The package moves user payloads between an outside SFTP zone and an inside
enclave zone through a scanning airlock, records every action in a
hash-chained audit log, and manages project access, permission monitoring and
stateless virtual sessions.
"""

__version__ = "0.1.0"
