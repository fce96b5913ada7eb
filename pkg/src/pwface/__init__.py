"""Password-conditioned face identity transformer.

One generator ``T`` maps a face and an N-bit password to an anonymized face;
the same generator with the bitwise-inverse password recovers the original,
and any other password yields a decoy identity.
"""

from .passwords import Password, inverse
from .networks import Generator, ModelBundle
from .pipeline import anonymize, deanonymize, process_whole_image

__all__ = ["Password", "inverse", "Generator", "ModelBundle", "anonymize", "deanonymize", "process_whole_image"]
__version__ = "0.1.0"
