import numpy as np
import pytest

from mmfuse.model import ModelConfig, build_model
from mmfuse.tokenize import CaseRecord, ResponseLabel, SurvivalLabel, hash_provider


@pytest.fixture(scope="session")
def toy_cfg():
    return ModelConfig(task="response", d=8, layers=2, heads=2, d_ff=16,
                       landmarks=4, n_bins=3)


@pytest.fixture(scope="session")
def toy_surv_cfg():
    return ModelConfig(task="survival", d=8, layers=2, heads=2, d_ff=16,
                       landmarks=4, n_bins=3)


@pytest.fixture()
def toy_model(toy_cfg):
    return build_model(toy_cfg, seed=11)


@pytest.fixture(scope="session")
def providers():
    return hash_provider("keys", 7, 8), hash_provider("genes", 8, 8)


def make_case(rng: np.random.Generator, case_id="c0", n_clin=3, n_rad=2, n_path=3,
              n_gene=3, label=None) -> CaseRecord:
    return CaseRecord(
        case_id=case_id,
        clinical=[(f"k{i}", float(rng.standard_normal())) for i in range(n_clin)],
        radiology=rng.standard_normal((n_rad, 256)) if n_rad else None,
        pathology=rng.standard_normal((n_path, 768)) if n_path else None,
        genomic=[(f"G{i}", float(rng.standard_normal())) for i in range(n_gene)],
        label=label if label is not None else ResponseLabel(1))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
