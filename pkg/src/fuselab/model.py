"""Full fused model: frozen encoder, projector(s), fusion modules, decoder LM.

Parameter prefixes drive the two-stage freeze schedule:

* ``enc.``  encoder weights, never trainable;
* ``proj.`` / ``fuse.``  newly initialized components, trainable in stage 1;
* ``lm.``  base language model, additionally unfrozen in stage 2.

Component RNG streams are split per prefix so that two plans sharing the same
seed also share every base weight; fusion modules draw from their own stream.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Parameter, Tensor
from .encoder import EncoderConfig, VisionEncoder, VisualFeatureSet
from .errors import ConfigError
from .fusion import FusionBundle, FusionPlan
from .lm import DecoderLM, LMConfig, SequenceLayout
from .rng import Rng
from .tensorio import load_checkpoint, save_checkpoint, state_hash

STAGE_ONE_PREFIXES = ("proj.", "fuse.")


class FusedModel:
    def __init__(self, enc_cfg: EncoderConfig, lm_cfg: LMConfig, plan: FusionPlan,
                 seed: int = 0, rng: Rng | None = None):
        base = rng if rng is not None else Rng(seed)
        self.enc_cfg = enc_cfg
        self.lm_cfg = lm_cfg
        self.plan = plan
        self.store = ParamStore()
        self.encoder = VisionEncoder(enc_cfg, self.store, "enc", base.split("enc"))
        self.lm = DecoderLM(lm_cfg, self.store, "lm", base.split("lm"))
        self.fusion = FusionBundle(plan, enc_cfg, lm_cfg.hidden, lm_cfg.depth,
                                   lm_cfg.heads, self.store,
                                   base.split("proj"), base.split("fuse"))
        self.set_stage(1)

    # -- freeze schedule ----------------------------------------------------

    def set_stage(self, stage: int) -> None:
        """1: only new components train; 2: everything except the encoder."""
        for p in self.store:
            if p.name.startswith("enc."):
                p.trainable = False
            elif stage == 1:
                p.trainable = p.name.startswith(STAGE_ONE_PREFIXES)
            elif stage == 2:
                p.trainable = True
            else:
                p.trainable = False

    def trainable_params(self) -> list[Parameter]:
        return [p for p in self.store if p.trainable]

    # -- forward ------------------------------------------------------------

    def encode_image(self, image: np.ndarray) -> VisualFeatureSet:
        return self.encoder.encode(image)

    def forward_logits(self, image: np.ndarray, text_ids,
                       feats: VisualFeatureSet | None = None) -> tuple[Tensor, SequenceLayout]:
        feats = feats if feats is not None else self.encoder.encode(image)
        visual = self.fusion.visual_tokens(feats)
        hooks = self.fusion.internal_hooks(feats, n_visual=self.enc_cfg.n_patches)
        return self.lm.forward(visual, text_ids, hooks)

    def loss(self, image: np.ndarray, prompt_ids, answer_ids,
             feats: VisualFeatureSet | None = None) -> Tensor:
        text_ids = np.concatenate([np.asarray(prompt_ids, dtype=np.int64),
                                   np.asarray(answer_ids, dtype=np.int64)])
        logits, layout = self.forward_logits(image, text_ids, feats=feats)
        return self.lm.loss_from_logits(logits, layout, text_ids,
                                        answer_start=len(prompt_ids))

    def greedy_decode(self, image: np.ndarray, prompt_ids, eos_id: int,
                      max_new: int) -> list[int]:
        """Argmax continuation of the prompt; stops at EOS or max_new tokens."""
        feats = self.encoder.encode(image)
        text = list(int(t) for t in prompt_ids)
        out: list[int] = []
        for _ in range(max_new):
            logits, _ = self.forward_logits(image, np.asarray(text), feats=feats)
            nxt = int(np.argmax(logits.data[-1]))
            out.append(nxt)
            text.append(nxt)
            if nxt == eos_id:
                break
        return out

    # -- persistence --------------------------------------------------------

    def component_hash(self, prefix: str) -> str:
        return state_hash(self.store.state_arrays(), prefix=prefix)

    def save_checkpoint(self, path, extra_meta: dict | None = None) -> None:
        meta = {"plan_fingerprint": self.plan.fingerprint()}
        meta.update(extra_meta or {})
        save_checkpoint(path, self.store.state_arrays(), meta=meta)

    def load_checkpoint_file(self, path) -> dict:
        named, meta = load_checkpoint(path)
        expected = self.plan.fingerprint()
        found = meta.get("plan_fingerprint")
        if found != expected:
            raise ConfigError(
                f"checkpoint plan fingerprint {found} does not match model plan {expected}")
        for p in self.store:
            if p.name not in named:
                raise ConfigError(f"checkpoint missing parameter '{p.name}'")
            p.tensor.data[...] = named[p.name]
        return meta
