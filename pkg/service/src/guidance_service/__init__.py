"""HTTP guidance service speaking the voxelprior wire protocol.

Endpoints: POST /v1/guidance, /v1/embed_text, /v1/embed_image and
GET /v1/health. Three encoder backends: "stub" (zero loss/gradients, no
model), "procedural" (deterministic random-projection featurizer, used by the
hermetic test suite), and "clip" (a real image--text encoder, loaded only when
its weights are available locally).
"""

from .app import create_app
from .encoders import (
    EMBED_DIM,
    ClipEncoder,
    ProceduralEncoder,
    StubEncoder,
    load_encoder,
)

__all__ = [
    "EMBED_DIM",
    "ClipEncoder",
    "ProceduralEncoder",
    "StubEncoder",
    "create_app",
    "load_encoder",
]
