"""LSTM baselines that share the DMNC training loop, losses, and decoder
shape but have no external memory.

DualLstm keeps one encoder per view and passes only the concatenated final
states to the decoder. ConcatLstm flattens the two views into one long
sequence (all of view 1, then all of view 2, each through its own embedding)
and duplicates its single final state so the same decoder fits. Both use the
DMNC output heads with the memory read terms removed: sequence logits are
o1 + o2, and the set head squashes a linear map of the final states.

The no-op memory-lifecycle methods let the training and evaluation drivers
treat every model kind identically.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import MODEL_KINDS, ModelConfig
from .errors import ContractError, DataError
from .nn import Embedding, Linear, LstmCell, LstmState, seq_loss, set_loss, uniform_init
from .rng import stream
from .tasks import TwoViewSample
from .tensor import Tensor


class _LstmSeq2Seq:
    """Shared decoder and harness plumbing; subclasses provide encoding."""

    def __init__(self, config: ModelConfig, seed: int):
        c = config
        self.config = c
        dec_hidden = 2 * c.hidden

        def init(tag: str) -> np.random.Generator:
            return stream(seed, f"init:{tag}")

        self.embed1 = Embedding(init("embed1"), c.vocab_in1, c.embed)
        self.embed2 = Embedding(init("embed2"), c.vocab_in2, c.embed)
        self._build_encoders(init)
        if c.output == "sequence":
            self.embed_out = Embedding(init("embed-out"), c.vocab_out + 1, c.embed)
            self.dec = LstmCell(init("dec"), c.embed, dec_hidden)
            self.out1 = Linear(init("out1"), dec_hidden, c.vocab_out)
            self.out2 = Linear(init("out2"), dec_hidden, c.vocab_out)
        else:
            self.comb3 = T.parameter(uniform_init(init("comb3"),
                                                  (dec_hidden, dec_hidden), dec_hidden))
            self.fuse = Linear(init("fuse"), dec_hidden, c.vocab_out)

    def _build_encoders(self, init) -> None:
        raise NotImplementedError

    def _encode(self, sample: TwoViewSample) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def _encoder_parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.embed1.named_parameters("embed1"))
        out.update(self.embed2.named_parameters("embed2"))
        out.update(self._encoder_parameters())
        if self.config.output == "sequence":
            out.update(self.embed_out.named_parameters("embed_out"))
            out.update(self.dec.named_parameters("dec"))
            out.update(self.out1.named_parameters("out1"))
            out.update(self.out2.named_parameters("out2"))
        else:
            out["comb3"] = self.comb3
            out.update(self.fuse.named_parameters("fuse"))
        return out

    # Memory lifecycle no-ops so the drivers can stay model-agnostic.
    def reset_memories(self) -> None:
        pass

    def detach_memories(self) -> None:
        pass

    def set_write_protect(self, flag: bool) -> None:
        pass

    def encode_interleaved(self, sample: TwoViewSample,
                           trace: list | None = None) -> tuple[Tensor, Tensor]:
        l1, l2 = len(sample.view1), len(sample.view2)
        if l1 < 1 or l2 < 1:
            raise DataError(f"both views need at least one event, "
                            f"got lengths {l1} and {l2}")
        return self._encode(sample)

    def decode_sequence(self, h1: Tensor, h2: Tensor,
                        targets: list[int] | None = None,
                        length: int | None = None
                        ) -> tuple[list[Tensor], list[int]]:
        if self.config.output != "sequence":
            raise ContractError("sequence decoding on a set-output model")
        if targets is None and length is None:
            raise DataError("free-running decode needs the target length")
        steps = len(targets) if targets is not None else length
        c = self.config
        state = LstmState(T.concat([h1, h2]),
                          T.constant(np.zeros(2 * c.hidden)))
        prev = c.vocab_out  # start token row
        probs: list[Tensor] = []
        preds: list[int] = []
        for t in range(steps):
            hidden, state = self.dec(self.embed_out(prev, view="output"), state)
            logits = T.add(self.out1(hidden), self.out2(hidden))
            p = T.softmax(logits)
            probs.append(p)
            pred = int(p.data.argmax())
            preds.append(pred)
            prev = targets[t] if targets is not None else pred
        return probs, preds

    def decode_set(self, h1: Tensor, h2: Tensor) -> Tensor:
        if self.config.output != "set":
            raise ContractError("set decoding on a sequence-output model")
        finals = T.concat([h1, h2])
        return T.sigmoid(self.fuse(T.matmul(self.comb3, finals)))

    def forward(self, sample: TwoViewSample, fresh: bool = True,
                trace: list | None = None):
        h1, h2 = self.encode_interleaved(sample, trace)
        if self.config.output == "sequence":
            probs, preds = self.decode_sequence(h1, h2,
                                                targets=list(sample.output))
            return seq_loss(probs, list(sample.output)), preds
        scores = self.decode_set(h1, h2)
        return set_loss(scores, sample.output), scores


class DualLstm(_LstmSeq2Seq):
    """One LSTM per view; only the final states reach the decoder."""

    def _build_encoders(self, init) -> None:
        c = self.config
        self.enc1 = LstmCell(init("enc1"), c.embed, c.hidden)
        self.enc2 = LstmCell(init("enc2"), c.embed, c.hidden)

    def _encoder_parameters(self) -> dict[str, Tensor]:
        out = self.enc1.named_parameters("enc1")
        out.update(self.enc2.named_parameters("enc2"))
        return out

    def _encode(self, sample: TwoViewSample) -> tuple[Tensor, Tensor]:
        state1 = self.enc1.initial_state()
        for index in sample.view1:
            _, state1 = self.enc1(self.embed1(index, view="view1"), state1)
        state2 = self.enc2.initial_state()
        for index in sample.view2:
            _, state2 = self.enc2(self.embed2(index, view="view2"), state2)
        return state1.h, state2.h


class ConcatLstm(_LstmSeq2Seq):
    """One LSTM over view 1 followed by view 2, final state duplicated."""

    def _build_encoders(self, init) -> None:
        c = self.config
        self.enc = LstmCell(init("enc"), c.embed, c.hidden)

    def _encoder_parameters(self) -> dict[str, Tensor]:
        return self.enc.named_parameters("enc")

    def _encode(self, sample: TwoViewSample) -> tuple[Tensor, Tensor]:
        state = self.enc.initial_state()
        for index in sample.view1:
            _, state = self.enc(self.embed1(index, view="view1"), state)
        for index in sample.view2:
            _, state = self.enc(self.embed2(index, view="view2"), state)
        return state.h, state.h


def make_model(kind: str, config: ModelConfig, seed: int):
    """Instantiate any of the four model kinds with stream-keyed init."""
    import dataclasses

    from .model import Dmnc
    if kind == "dmnc_late":
        return Dmnc(dataclasses.replace(config, mode="late"), seed)
    if kind == "dmnc_early":
        return Dmnc(dataclasses.replace(config, mode="early"), seed)
    if kind == "dual_lstm":
        return DualLstm(config, seed)
    if kind == "concat_lstm":
        return ConcatLstm(config, seed)
    raise DataError(f"unknown model kind {kind!r}, expected one of {MODEL_KINDS}")
