import pytest

from hyperqa import datasets as D


@pytest.fixture(scope="session")
def synth_bundle():
    """Small 2-hop bundle shared by tests that need real QA structure."""
    spec = D.SynthSpec(
        n_entities=90, n_relations=4, depth=2, n_questions=100, branching=2, seed=20
    )
    return D.synth_generate(spec)
