import pytest

from fuselab.encoder import EncoderConfig
from fuselab.harness import DataConfig, ExperimentConfig, TrainConfig
from fuselab.lm import LMConfig


@pytest.fixture
def tiny_cfg(tmp_path):
    """Seconds-scale experiment config: 1x1 grid, shallow towers."""
    return ExperimentConfig(
        seed=0,
        out_dir=str(tmp_path / "runs"),
        encoder=EncoderConfig(image_size=8, patch_size=4, depth=4, width=8,
                              heads=2, mlp_ratio=2, channels=3),
        lm=LMConfig(depth=4, hidden=16, heads=2, vocab_size=40, max_seq=48,
                    mlp_ratio=2),
        data=DataConfig(seed=0, grid_k=1, n_captions=10, n_qa=16, n_eval=8),
        train=TrainConfig(stage1_steps=3, stage1_lr=1e-3, stage2_steps=4,
                          stage2_lr=1e-3, batch_size=1, weight_decay=0.01),
    )
