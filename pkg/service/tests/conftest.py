import warnings

import pytest

try:
    from guidance_service import ProceduralEncoder, StubEncoder, create_app
    _HAVE_SERVICE = True
except ImportError:
    _HAVE_SERVICE = False

# keep a combined engine+service pytest run green when only the engine
# package is installed
collect_ignore_glob = [] if _HAVE_SERVICE else ["test_*.py"]

if _HAVE_SERVICE:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    @pytest.fixture(scope="session")
    def procedural_encoder():
        return ProceduralEncoder()

    @pytest.fixture(scope="session")
    def procedural_client(procedural_encoder):
        return TestClient(create_app(procedural_encoder, max_image_dim=256))

    @pytest.fixture(scope="session")
    def stub_client():
        return TestClient(create_app(StubEncoder()))
