import pytest
import torch

from attrseg.config import EncoderConfig, EnhancementConfig, ModelConfig, TextEncoderConfig
from attrseg.data import SyntheticSpec, generate_dataset
from attrseg.prompts import AttributeKind, ClassDescription, ClassDescriptionSet, FixtureClient, Source, generate_descriptions

CLASSES = ["disk", "tile", "wedge", "block", "hoop"]
ACCEPTANCE: list[str] = []  # PASS/FAIL lines from test_acceptance, echoed in the summary


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


def tiny_model_config(image_size=16) -> ModelConfig:
    return ModelConfig(
        clip=EncoderConfig(image_size=image_size, patch_size=4, depth=3, heads=2, dim=8, tap_indices=(1, 2, 3), seed=0),
        sam=EncoderConfig(image_size=image_size, patch_size=4, depth=3, heads=2, dim=12, tap_indices=(1, 2, 3), seed=1),
        text=TextEncoderConfig(vocab_size=64, width=8, depth=1, heads=2),
        enhancement=EnhancementConfig(embed_dim=8, guidance_dim=4, window=2, heads=2, decoder_dims=(6, 4)),
    )


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def fixture_bank(tmp_path):
    client = FixtureClient()
    for attr in AttributeKind:
        generate_descriptions(CLASSES, attr, client, tmp_path / "bank.tsv")
    return ClassDescriptionSet.load(tmp_path / "bank.tsv")


def make_bank(names, attribute=AttributeKind.COMPREHENSIVE, suffix=""):
    return ClassDescriptionSet(
        ClassDescription(n, attribute, f"a {n} that is round{suffix}", Source.FIXTURE) for n in names)


@pytest.fixture
def tiny_splits():
    spec = SyntheticSpec(image_size=16, radius=(3.0, 5.0), objects_per_image=(1, 2), n_train=8, n_val=4)
    return spec, *generate_dataset(spec)


@pytest.fixture(autouse=True)
def _deterministic():
    torch.manual_seed(0)
    yield
