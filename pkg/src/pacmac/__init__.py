"""PACMAC: attention-conditioned masking consistency for domain adaptation."""

from . import tensor
