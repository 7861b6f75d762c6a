"""Turn-level CLS embedding export.

Runs a pretrained BERT-style encoder over "[CLS] system [SEP] user [SEP]"
for every turn of a dialogue JSONL file and writes the first-position
(CLS) vector per turn into the binary embedding-store format, keyed by
(dialogue_id, 1-based turn index).
"""

import json
import logging
import struct
from dataclasses import dataclass

import numpy as np

log = logging.getLogger("asap_export")

MAGIC = b"ASAPEMB1"
FORMAT_VERSION = 1


class ExportError(ValueError):
    pass


@dataclass
class ExportJob:
    input_path: str
    model_id: str
    out_path: str
    max_length: int = 512
    batch_size: int = 16
    expect_dim: int | None = None
    device: str | None = None

    def __post_init__(self):
        if self.max_length < 8:
            raise ExportError(f"max_length must be >= 8, got {self.max_length}")
        if self.batch_size < 1:
            raise ExportError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.expect_dim is not None and self.expect_dim < 1:
            raise ExportError(f"expect_dim must be >= 1, got {self.expect_dim}")


def read_turns(path) -> list[tuple[str, int, str, str]]:
    """Minimal reader for the dialogue JSONL schema.

    Returns (dialogue_id, 1-based turn index, system, user) in file order.
    Only the fields the exporter needs are validated; ratings and actions
    pass through untouched.
    """
    rows = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ExportError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            did = obj.get("dialogue_id")
            if not isinstance(did, str) or not did:
                raise ExportError(f"{path}:{lineno}: dialogue_id must be a nonempty string")
            if did in seen:
                raise ExportError(f"{path}:{lineno}: duplicate dialogue_id {did!r}")
            seen.add(did)
            turns = obj.get("turns")
            if not isinstance(turns, list) or not turns:
                raise ExportError(f"{path}:{lineno}: dialogue {did!r} must have >= 1 turn")
            for i, t in enumerate(turns):
                for key in ("system", "user"):
                    if not isinstance(t.get(key), str):
                        raise ExportError(
                            f"{path}:{lineno}: dialogue {did!r} turn {i + 1}: "
                            f"field {key!r} must be a string"
                        )
                rows.append((did, i + 1, t["system"], t["user"]))
    return rows


def _load_encoder(job: ExportJob):
    # imported lazily so schema errors do not require torch
    import torch
    from transformers import AutoModel, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(job.model_id)
        model = AutoModel.from_pretrained(job.model_id)
    except Exception as e:
        raise ExportError(
            f"could not load model {job.model_id!r}: {e}. Pass a local "
            f"directory or an identifier the transformers library can resolve."
        ) from e
    if tokenizer.cls_token_id is None or tokenizer.sep_token_id is None:
        raise ExportError(
            f"tokenizer for {job.model_id!r} has no CLS/SEP tokens; "
            f"a BERT-style encoder is required"
        )
    device = torch.device(job.device or "cpu")
    model.to(device)
    model.eval()
    dim = int(model.config.hidden_size)
    if job.expect_dim is not None and dim != job.expect_dim:
        raise ExportError(
            f"model hidden size {dim} != --expect-dim {job.expect_dim}"
        )
    return tokenizer, model, device, dim


def _encode_rows(tokenizer, rows, max_length):
    """Token ids per row: [CLS] system [SEP] user [SEP], tail-truncated."""
    cls_id, sep_id = tokenizer.cls_token_id, tokenizer.sep_token_id
    encoded = []
    truncated = 0
    for did, turn, system, user in rows:
        sys_ids = tokenizer(system, add_special_tokens=False)["input_ids"]
        usr_ids = tokenizer(user, add_special_tokens=False)["input_ids"]
        ids = [cls_id] + sys_ids + [sep_id] + usr_ids + [sep_id]
        if len(ids) > max_length:
            log.warning("truncating (%r, turn %d) from %d to %d tokens",
                        did, turn, len(ids), max_length)
            ids = ids[: max_length - 1] + [sep_id]
            truncated += 1
        encoded.append(ids)
    if truncated:
        log.warning("%d of %d turns exceeded max_length=%d and were "
                    "tail-truncated", truncated, len(rows), max_length)
    return encoded


def _forward_batches(model, device, encoded, pad_id, batch_size):
    import torch

    vectors = []
    with torch.no_grad():
        for start in range(0, len(encoded), batch_size):
            chunk = encoded[start : start + batch_size]
            width = max(len(ids) for ids in chunk)
            input_ids = torch.full((len(chunk), width), pad_id, dtype=torch.long)
            mask = torch.zeros((len(chunk), width), dtype=torch.long)
            for r, ids in enumerate(chunk):
                input_ids[r, : len(ids)] = torch.tensor(ids, dtype=torch.long)
                mask[r, : len(ids)] = 1
            out = model(input_ids=input_ids.to(device),
                        attention_mask=mask.to(device))
            cls = out.last_hidden_state[:, 0, :].cpu().numpy()
            vectors.append(cls.astype("<f4"))
    return np.concatenate(vectors, axis=0) if vectors else np.zeros((0, 0), "<f4")


def write_store(path, dim: int, records):
    """records: iterable of (dialogue_id, turn_index, float32 vector)."""
    records = list(records)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQ", FORMAT_VERSION, dim, len(records)))
        for did, turn, vec in records:
            id_bytes = did.encode("utf-8")
            if len(id_bytes) > 0xFFFF:
                raise ExportError(f"dialogue id too long to store: {did[:32]!r}...")
            fh.write(struct.pack("<H", len(id_bytes)))
            fh.write(id_bytes)
            fh.write(struct.pack("<I", turn))
            fh.write(np.asarray(vec, dtype="<f4").tobytes())


def export(job: ExportJob) -> int:
    """Run the export; returns the number of records written."""
    rows = read_turns(job.input_path)
    tokenizer, model, device, dim = _load_encoder(job)
    encoded = _encode_rows(tokenizer, rows, job.max_length)
    pad_id = tokenizer.pad_token_id
    if pad_id is None:
        pad_id = 0  # masked out anyway
    vectors = _forward_batches(model, device, encoded, pad_id, job.batch_size)
    if len(rows) and vectors.shape[1] != dim:
        raise ExportError(
            f"encoder returned dim {vectors.shape[1]}, expected {dim}"
        )
    if not np.all(np.isfinite(vectors)):
        raise ExportError("encoder produced non-finite values")
    write_store(job.out_path, dim,
                ((did, turn, vectors[i])
                 for i, (did, turn, _, _) in enumerate(rows)))
    log.info("wrote %d records (dim %d) to %s", len(rows), dim, job.out_path)
    return len(rows)
