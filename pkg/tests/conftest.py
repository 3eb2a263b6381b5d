import pytest

from densedino.distill import TrainConfig
from densedino.encoder import EncoderConfig

ACCEPTANCE_LINES: list[str] = []


def record(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_encoder() -> EncoderConfig:
    return EncoderConfig(image_res=16, patch_size=8, depth=1, embed_dim=16, heads=2, out_dim=16, bottleneck_dim=8)


@pytest.fixture
def tiny_train() -> TrainConfig:
    return TrainConfig(
        epochs=1,
        batch_size=4,
        n_train_scenes=8,
        scene_size=32,
        n_objects=(1, 2),
        object_size=(4.0, 8.0),
        local_res=8,
        warmup_teacher_temp_epochs=1,
    )
