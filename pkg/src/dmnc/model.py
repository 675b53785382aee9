"""Dual-memory encoder-decoder model and the training/evaluation drivers.

Two LSTM encoders each own one external memory and advance in an alternating
schedule so asynchronous views exchange information step by step. Fusion
happens either late (each encoder reads only its own memory) or early (both
encoders read the concatenation of the two memories through a shared read
map, and writes go through a per-encoder cache so a value can wait for the
other view before being committed).

One decoder consumes the concatenated final encoder states. Memories are
write-protected while decoding. For sequence output the decoder runs an LSTM
with teacher forcing during training and feeds back its own argmax at
evaluation; for set output it reads each memory once and squashes a linear
combination of reads and final states. For multi-admission records the
memories persist across admissions of one patient (values carried, gradient
history cut) and are cleared only when the next patient starts.
"""

from __future__ import annotations

import time

import numpy as np

from . import memory as mem_ops
from . import tensor as T
from .config import ModelConfig, TrainConfig
from .errors import ContractError, DataError
from .memory import InterfaceLayout, MemoryConfig, MemoryState
from .nn import (Adam, Embedding, Linear, LstmCell, LstmState, clip_gradients,
                 seq_loss, set_loss, uniform_init)
from .rng import stream
from .tasks import PatientRecord, TwoViewSample
from .tensor import Tensor


class Dmnc:
    """Two memory-augmented encoders, one decoder."""

    def __init__(self, config: ModelConfig, seed: int):
        c = config
        self.config = c
        self.layout = InterfaceLayout(c.word, c.read_heads)
        reads_dim = c.read_heads * c.word

        def init(tag: str) -> np.random.Generator:
            return stream(seed, f"init:{tag}")

        self.embed1 = Embedding(init("embed1"), c.vocab_in1, c.embed)
        self.embed2 = Embedding(init("embed2"), c.vocab_in2, c.embed)
        self.enc1 = LstmCell(init("enc1"), c.embed + reads_dim, c.hidden)
        self.enc2 = LstmCell(init("enc2"), c.embed + reads_dim, c.hidden)
        self.iface1 = Linear(init("iface1"), c.hidden, self.layout.width)
        self.iface2 = Linear(init("iface2"), c.hidden, self.layout.width)
        for iface in (self.iface1, self.iface2):
            self._shape_interface_bias(iface.bias.data)
        if c.mode == "early":
            # Shared read map: both encoders address [M1; M2] with one
            # parameter set producing keys, strengths, and modes.
            self.read_shared = Linear(init("read-shared"), c.hidden,
                                      c.read_heads * (c.word + 4))
            for i in range(c.read_heads):  # strength entries after the keys
                self.read_shared.bias.data[c.read_heads * c.word + i] += 2.0
        mem_config = MemoryConfig(c.cells, c.word, c.read_heads)
        span = c.cells if c.mode == "late" else 2 * c.cells
        self.mem1 = MemoryState(mem_config, span)
        self.mem2 = MemoryState(mem_config, span)

        dec_hidden = 2 * c.hidden
        if c.output == "sequence":
            # Output embedding reserves one extra row as the start token.
            self.embed_out = Embedding(init("embed-out"), c.vocab_out + 1, c.embed)
            self.dec = LstmCell(init("dec"), c.embed + 2 * reads_dim, dec_hidden)
            self.out1 = Linear(init("out1"), dec_hidden, c.vocab_out)
            self.out2 = Linear(init("out2"), dec_hidden, c.vocab_out)
            self.dec_read = Linear(init("dec-read"), c.vocab_out,
                                   c.read_heads * (c.word + 1))
            self._sharpen_read_bias(self.dec_read)
            self.fuse = Linear(init("fuse"), 2 * reads_dim, c.vocab_out)
        else:
            self.set_read = Linear(init("set-read"), dec_hidden,
                                   c.read_heads * (c.word + 1))
            self._sharpen_read_bias(self.set_read)
            self.comb1 = T.parameter(uniform_init(init("comb1"),
                                                  (dec_hidden, reads_dim), reads_dim))
            self.comb2 = T.parameter(uniform_init(init("comb2"),
                                                  (dec_hidden, reads_dim), reads_dim))
            self.comb3 = T.parameter(uniform_init(init("comb3"),
                                                  (dec_hidden, dec_hidden), dec_hidden))
            self.fuse = Linear(init("fuse"), dec_hidden, c.vocab_out)

    def _sharpen_read_bias(self, read_map: Linear) -> None:
        """Decoder reads share the diffuse-at-init problem: strength entries
        sit after the R*word key entries in the flat (keys, strengths) map."""
        c = self.config
        for i in range(c.read_heads):
            read_map.bias.data[c.read_heads * c.word + i] += 2.0

    def _shape_interface_bias(self, bias: np.ndarray) -> None:
        """Start writes strong and allocation-ordered, content matching
        sharp, and freeing off. Untrained gates near 0.5 smear every event
        across half-written rows and near-uniform reads return mush, so the
        memory path earns no gradient; biased gates give clean one-row
        writes in usage order from the first iteration, all still learnable.
        """
        for name in ("read_strengths", "write_strength", "alloc_gate",
                     "write_gate"):
            bias[self.layout.slice(name)] += 2.0
        bias[self.layout.slice("free_gates")] -= 2.0

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.embed1.named_parameters("embed1"))
        out.update(self.embed2.named_parameters("embed2"))
        out.update(self.enc1.named_parameters("enc1"))
        out.update(self.enc2.named_parameters("enc2"))
        out.update(self.iface1.named_parameters("iface1"))
        out.update(self.iface2.named_parameters("iface2"))
        if self.config.mode == "early":
            out.update(self.read_shared.named_parameters("read_shared"))
        if self.config.output == "sequence":
            out.update(self.embed_out.named_parameters("embed_out"))
            out.update(self.dec.named_parameters("dec"))
            out.update(self.out1.named_parameters("out1"))
            out.update(self.out2.named_parameters("out2"))
            out.update(self.dec_read.named_parameters("dec_read"))
        else:
            out.update(self.set_read.named_parameters("set_read"))
            out["comb1"] = self.comb1
            out["comb2"] = self.comb2
            out["comb3"] = self.comb3
        out.update(self.fuse.named_parameters("fuse"))
        return out

    # -- memory lifecycle ---------------------------------------------------

    def reset_memories(self) -> None:
        self.mem1.reset()
        self.mem2.reset()

    def detach_memories(self) -> None:
        self.mem1.detach()
        self.mem2.detach()

    def set_write_protect(self, flag: bool) -> None:
        self.mem1.set_write_protect(flag)
        self.mem2.set_write_protect(flag)

    # -- encoding -----------------------------------------------------------

    def _interface(self, view: int, hidden: Tensor) -> mem_ops.InterfaceVector:
        params = self.iface1 if view == 1 else self.iface2
        iface = mem_ops.interface_split(hidden, params, self.layout)
        if self.config.mode == "early":
            d, r = self.config.word, self.config.read_heads
            raw = self.read_shared(hidden)
            iface.read_keys = [raw[i * d:(i + 1) * d] for i in range(r)]
            iface.read_strengths = [T.oneplus(raw[r * d + i]) for i in range(r)]
            iface.read_modes = [T.softmax(raw[r * d + r + 3 * i:
                                              r * d + r + 3 * (i + 1)])
                                for i in range(r)]
        return iface

    def encoder_step(self, view: int, index: int, state: LstmState,
                     reads: list[Tensor], step: int,
                     trace: list | None = None) -> tuple[LstmState, list[Tensor]]:
        """Embed one event, advance the view's LSTM, write to the view's own
        memory, and read back per the fusion mode."""
        c = self.config
        if view == 1:
            embedded = self.embed1(index, view="view1")
        elif view == 2:
            embedded = self.embed2(index, view="view2")
        else:
            raise ContractError(f"view must be 1 or 2, got {view!r}")
        x = T.concat([embedded] + reads)
        hidden, new_state = (self.enc1 if view == 1 else self.enc2)(x, state)
        iface = self._interface(view, hidden)
        own = self.mem1 if view == 1 else self.mem2
        if c.mode == "early":
            rows = slice(0, c.cells) if view == 1 else slice(c.cells, 2 * c.cells)
            mem_ops.write_step(own, iface, "early", own_rows=rows)
        else:
            mem_ops.write_step(own, iface, "late")
        new_reads = mem_ops.fused_read(iface, self.mem1, self.mem2, c.mode,
                                       owner=view)
        if trace is not None:
            trace.append({
                "view": view, "step": step, "event_index": int(index),
                "g_w": iface.write_gate.item(),
                "g_c_mean": (float(iface.cache_gate.data.mean())
                             if c.mode == "early" else None),
            })
        return new_state, new_reads

    def encode_interleaved(self, sample: TwoViewSample,
                           trace: list | None = None) -> tuple[Tensor, Tensor]:
        """Alternate the views: each loop turn advances view 1 if it has
        events left, then view 2. Returns the final hidden states."""
        l1, l2 = len(sample.view1), len(sample.view2)
        if l1 < 1 or l2 < 1:
            raise DataError(f"both views need at least one event, "
                            f"got lengths {l1} and {l2}")
        c = self.config
        state1 = self.enc1.initial_state()
        state2 = self.enc2.initial_state()
        span_zero = T.constant(np.zeros(c.word))
        reads1 = [span_zero] * c.read_heads
        reads2 = [span_zero] * c.read_heads
        t1 = t2 = 0
        while t1 < l1 or t2 < l2:
            if t1 < l1:
                state1, reads1 = self.encoder_step(1, sample.view1[t1], state1,
                                                   reads1, t1, trace)
                t1 += 1
            if t2 < l2:
                state2, reads2 = self.encoder_step(2, sample.view2[t2], state2,
                                                   reads2, t2, trace)
                t2 += 1
        return state1.h, state2.h

    # -- decoding -----------------------------------------------------------

    def _decoder_reads(self, raw: Tensor, state: MemoryState) -> Tensor:
        """Content-only reads keyed by a flat (keys, strengths) vector."""
        d, r = self.config.word, self.config.read_heads
        reads = []
        for i in range(r):
            key = raw[i * d:(i + 1) * d]
            strength = T.oneplus(raw[r * d + i])
            reads.append(mem_ops.content_read(state, key, strength))
        return T.concat(reads)

    def decode_sequence(self, h1: Tensor, h2: Tensor,
                        targets: list[int] | None = None,
                        length: int | None = None
                        ) -> tuple[list[Tensor], list[int]]:
        """Stepwise output distributions and argmax predictions.

        With ``targets`` the previous ground-truth symbol is fed back
        (teacher forcing); otherwise ``length`` must be given and the
        decoder feeds back its own predictions.
        """
        if self.config.output != "sequence":
            raise ContractError("sequence decoding on a set-output model")
        if targets is None and length is None:
            raise DataError("free-running decode needs the target length")
        steps = len(targets) if targets is not None else length
        c = self.config
        reads_dim = c.read_heads * c.word
        state = LstmState(T.concat([h1, h2]),
                          T.constant(np.zeros(2 * c.hidden)))
        r1 = T.constant(np.zeros(reads_dim))
        r2 = T.constant(np.zeros(reads_dim))
        prev = c.vocab_out  # start token row
        probs: list[Tensor] = []
        preds: list[int] = []
        for t in range(steps):
            x = T.concat([self.embed_out(prev, view="output"), r1, r2])
            hidden, state = self.dec(x, state)
            o1 = self.out1(hidden)
            o2 = self.out2(hidden)
            r1 = self._decoder_reads(self.dec_read(o1), self.mem1)
            r2 = self._decoder_reads(self.dec_read(o2), self.mem2)
            logits = T.add(T.add(o1, o2), self.fuse(T.concat([r1, r2])))
            p = T.softmax(logits)
            probs.append(p)
            pred = int(p.data.argmax())  # ties resolve to the lowest index
            preds.append(pred)
            prev = targets[t] if targets is not None else pred
        return probs, preds

    def decode_set(self, h1: Tensor, h2: Tensor) -> Tensor:
        """Per-label probabilities from one read of each memory plus the
        final hidden states."""
        if self.config.output != "set":
            raise ContractError("set decoding on a sequence-output model")
        finals = T.concat([h1, h2])
        raw = self.set_read(finals)
        r1 = self._decoder_reads(raw, self.mem1)
        r2 = self._decoder_reads(raw, self.mem2)
        combined = T.add(T.add(T.matmul(self.comb1, r1),
                               T.matmul(self.comb2, r2)),
                         T.matmul(self.comb3, finals))
        return T.sigmoid(self.fuse(combined))

    # -- full passes --------------------------------------------------------

    def forward(self, sample: TwoViewSample, fresh: bool = True,
                trace: list | None = None):
        """Encode, write-protect, decode, and compute the loss.

        ``fresh`` clears the memories first; pass False when state must
        persist across a patient's admissions. Returns (loss, predictions)
        where predictions are argmax indices for sequences and the score
        tensor for sets.
        """
        if fresh:
            self.reset_memories()
        self.set_write_protect(False)
        h1, h2 = self.encode_interleaved(sample, trace)
        self.set_write_protect(True)
        try:
            if self.config.output == "sequence":
                probs, preds = self.decode_sequence(h1, h2,
                                                    targets=list(sample.output))
                loss = seq_loss(probs, list(sample.output))
                return loss, preds
            scores = self.decode_set(h1, h2)
            loss = set_loss(scores, sample.output)
            return loss, scores
        finally:
            self.set_write_protect(False)


def parameter_count(model) -> int:
    return sum(p.data.size for p in model.named_parameters().values())


# ---------------------------------------------------------------------------
# Training and evaluation drivers
# ---------------------------------------------------------------------------


def train_patient(model, record: PatientRecord, optimizer: Adam,
                  clip_norm: float, reset_each_admission: bool = False) -> list[float]:
    """One pass over a patient: clear memories once, then per admission
    encode, decode the label set, backprop, clip, and step. Carried memory
    is detached at admission boundaries so each admission trains on its own
    tape. ``reset_each_admission`` is the persistence-ablation switch."""
    if not record.admissions:
        raise DataError(f"patient {record.patient} has no admissions")
    model.reset_memories()
    params = optimizer.params
    losses = []
    for admission in record.admissions:
        if not isinstance(admission.output, frozenset):
            raise DataError("patient training needs set-output admissions")
        if reset_each_admission:
            model.reset_memories()
        with T.Tape() as tape:
            loss, _ = model.forward(admission, fresh=False)
            T.backward(loss, tape)
        clip_gradients(params, clip_norm)
        optimizer.step()
        optimizer.zero_grad()
        losses.append(loss.item())
        model.detach_memories()
    return losses


def train_loop(model, data: list, train_config: TrainConfig,
               on_iteration=None, optimizer: Adam | None = None,
               start_iteration: int = 0) -> list[dict]:
    """Iterate either mini-batches of independent samples (mean loss, one
    optimizer step per iteration) or whole patients (one step per admission).
    Returns one log record per iteration.

    A resumed run passes its restored ``optimizer`` and the stored
    ``start_iteration``; the sample-order stream then skips the draws the
    finished iterations already consumed, so a split run and an unbroken one
    see identical data order.
    """
    if not data:
        raise DataError("empty training dataset")
    tc = train_config
    if optimizer is None:
        optimizer = Adam(model.named_parameters(), lr=tc.lr, beta1=tc.beta1,
                         beta2=tc.beta2, eps=tc.eps)
    order = stream(tc.seed, "batch-order")
    patient_data = isinstance(data[0], PatientRecord)
    draws_per_iteration = 1 if patient_data else tc.batch
    if start_iteration:
        order.integers(0, len(data), size=start_iteration * draws_per_iteration)
    log: list[dict] = []
    for it in range(start_iteration + 1, start_iteration + tc.iterations + 1):
        started = time.monotonic()
        if patient_data:
            record = data[int(order.integers(0, len(data)))]
            losses = train_patient(model, record, optimizer, tc.clip_norm)
            loss_value = float(np.mean(losses))
        else:
            picks = order.integers(0, len(data), size=tc.batch)
            total = 0.0
            for i in picks:
                with T.Tape() as tape:
                    loss, _ = model.forward(data[int(i)])
                    T.backward(loss, tape, seed=1.0 / tc.batch)
                total += loss.item()
            clip_gradients(optimizer.params, tc.clip_norm)
            optimizer.step()
            optimizer.zero_grad()
            loss_value = total / tc.batch
        record_out = {"iter": it, "loss": loss_value,
                      "wall_ms": (time.monotonic() - started) * 1000.0}
        log.append(record_out)
        if on_iteration is not None:
            on_iteration(record_out)
    return log


def evaluate_sum(model, samples: list[TwoViewSample]) -> float:
    """Free-running accuracy with the known output length per sample."""
    from .tasks import metric_seq_accuracy
    preds = []
    targets = []
    for sample in samples:
        model.reset_memories()
        model.set_write_protect(False)
        h1, h2 = model.encode_interleaved(sample)
        model.set_write_protect(True)
        try:
            _, p = model.decode_sequence(h1, h2, length=len(sample.output))
        finally:
            model.set_write_protect(False)
        preds.append(p)
        targets.append(list(sample.output))
    return metric_seq_accuracy(preds, targets)


def evaluate_patients(model, patients: list[PatientRecord],
                      reset_each_admission: bool = False
                      ) -> tuple[list[np.ndarray], list[frozenset[int]]]:
    """Score every admission in record order, persisting memory within each
    patient (unless ablated) exactly as during training."""
    scores: list[np.ndarray] = []
    truths: list[frozenset[int]] = []
    for record in patients:
        model.reset_memories()
        for admission in record.admissions:
            if reset_each_admission:
                model.reset_memories()
            model.set_write_protect(False)
            h1, h2 = model.encode_interleaved(admission)
            model.set_write_protect(True)
            try:
                out = model.decode_set(h1, h2)
            finally:
                model.set_write_protect(False)
            scores.append(out.data.copy())
            truths.append(admission.output)
            model.detach_memories()
    return scores, truths
