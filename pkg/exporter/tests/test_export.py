import json
import struct
from pathlib import Path

import numpy as np
import pytest

torch = pytest.importorskip("torch")
transformers = pytest.importorskip("transformers")

from asap_export import ExportError, ExportJob, export, read_turns
from asap_export.cli import main as cli_main

VOCAB = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]",
         "sys", "hello", "ok", "beep", "east", "west"]


@pytest.fixture(scope="session")
def model_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("tinybert")
    (d / "vocab.txt").write_text("\n".join(VOCAB) + "\n")
    tok = transformers.BertTokenizerFast(vocab_file=str(d / "vocab.txt"))
    tok.save_pretrained(str(d))
    cfg = transformers.BertConfig(
        vocab_size=len(VOCAB), hidden_size=8, num_hidden_layers=1,
        num_attention_heads=2, intermediate_size=16,
        max_position_embeddings=64,
    )
    torch.manual_seed(0)
    transformers.BertModel(cfg).save_pretrained(str(d))
    return str(d)


def write_dialogues(path, dialogues):
    with open(path, "w", encoding="utf-8") as fh:
        for did, turns in dialogues:
            obj = {"dialogue_id": did,
                   "turns": [{"system": s, "user": u, "rating": None,
                              "action": None} for s, u in turns]}
            fh.write(json.dumps(obj) + "\n")


def read_store(path):
    """Parse the binary store; returns (dim, {key: vec}, key order)."""
    blob = Path(path).read_bytes()
    assert blob[:8] == b"ASAPEMB1"
    version, dim, count = struct.unpack_from("<IIQ", blob, 8)
    assert version == 1
    off, recs, order = 24, {}, []
    for _ in range(count):
        (idl,) = struct.unpack_from("<H", blob, off)
        off += 2
        did = blob[off : off + idl].decode("utf-8")
        off += idl
        (turn,) = struct.unpack_from("<I", blob, off)
        off += 4
        vec = np.frombuffer(blob, "<f4", dim, off).copy()
        off += 4 * dim
        recs[(did, turn)] = vec
        order.append((did, turn))
    # no trailing bytes allowed
    assert off == len(blob)
    return dim, recs, order


@pytest.fixture()
def toy_jsonl(tmp_path):
    p = tmp_path / "toy.jsonl"
    write_dialogues(p, [
        ("d0", [("sys hello", "ok beep"), ("sys east", "west west")]),
        ("d1", [("hello", "beep"), ("sys sys", "ok"), ("east", "hello ok")]),
        ("d2", [("west beep", "sys")]),
    ])
    return p


class TestReadTurns:
    def test_order_and_indices(self, toy_jsonl):
        rows = read_turns(toy_jsonl)
        assert [(r[0], r[1]) for r in rows] == [
            ("d0", 1), ("d0", 2), ("d1", 1), ("d1", 2), ("d1", 3), ("d2", 1)]

    def test_missing_field(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"dialogue_id": "x", "turns": [{"system": "a"}]}\n')
        with pytest.raises(ExportError, match="user"):
            read_turns(p)

    def test_duplicate_id(self, tmp_path):
        p = tmp_path / "dup.jsonl"
        row = '{"dialogue_id": "x", "turns": [{"system": "a", "user": "b"}]}\n'
        p.write_text(row + row)
        with pytest.raises(ExportError, match="duplicate"):
            read_turns(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            read_turns(tmp_path / "nope.jsonl")


class TestJobValidation:
    def test_max_length_floor(self):
        with pytest.raises(ExportError):
            ExportJob(input_path="a", model_id="b", out_path="c", max_length=4)

    def test_batch_size(self):
        with pytest.raises(ExportError):
            ExportJob(input_path="a", model_id="b", out_path="c", batch_size=0)


class TestExport:
    def test_count_dim_coverage(self, toy_jsonl, model_dir, tmp_path):
        out = tmp_path / "emb.bin"
        n = export(ExportJob(input_path=str(toy_jsonl), model_id=model_dir,
                             out_path=str(out), max_length=32, batch_size=2))
        assert n == 6
        dim, recs, order = read_store(out)
        assert dim == 8
        assert set(recs) == {(r[0], r[1]) for r in read_turns(toy_jsonl)}
        # written in input order
        assert order == [(r[0], r[1]) for r in read_turns(toy_jsonl)]
        for vec in recs.values():
            assert np.all(np.isfinite(vec))

    def test_two_runs_byte_identical(self, toy_jsonl, model_dir, tmp_path):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        for out in (a, b):
            export(ExportJob(input_path=str(toy_jsonl), model_id=model_dir,
                             out_path=str(out), max_length=32, batch_size=2))
        assert a.read_bytes() == b.read_bytes()

    def test_single_dialogue_two_turns(self, model_dir, tmp_path):
        p = tmp_path / "one.jsonl"
        write_dialogues(p, [("only", [("sys", "ok"), ("sys", "beep")])])
        out = tmp_path / "one.bin"
        export(ExportJob(input_path=str(p), model_id=model_dir,
                         out_path=str(out)))
        dim, recs, _ = read_store(out)
        assert dim == 8
        assert set(recs) == {("only", 1), ("only", 2)}

    def test_truncation_warns(self, model_dir, tmp_path, caplog):
        p = tmp_path / "long.jsonl"
        write_dialogues(p, [("L", [("sys " * 30, "ok " * 40)])])
        out = tmp_path / "long.bin"
        with caplog.at_level("WARNING", logger="asap_export"):
            export(ExportJob(input_path=str(p), model_id=model_dir,
                             out_path=str(out), max_length=16))
        assert any("truncat" in r.message for r in caplog.records)
        dim, recs, _ = read_store(out)
        assert set(recs) == {("L", 1)}

    def test_expect_dim_mismatch(self, toy_jsonl, model_dir, tmp_path):
        with pytest.raises(ExportError, match="hidden size"):
            export(ExportJob(input_path=str(toy_jsonl), model_id=model_dir,
                             out_path=str(tmp_path / "x.bin"), expect_dim=16))

    def test_bad_model_id(self, toy_jsonl, tmp_path):
        job = ExportJob(input_path=str(toy_jsonl),
                        model_id=str(tmp_path / "no-model-here"),
                        out_path=str(tmp_path / "x.bin"))
        with pytest.raises(ExportError, match="could not load"):
            export(job)

    def test_batch_size_does_not_change_vectors(self, toy_jsonl, model_dir,
                                                tmp_path):
        outs = []
        for bs in (1, 3):
            out = tmp_path / f"bs{bs}.bin"
            export(ExportJob(input_path=str(toy_jsonl), model_id=model_dir,
                             out_path=str(out), batch_size=bs))
            outs.append(read_store(out)[1])
        for key in outs[0]:
            assert np.allclose(outs[0][key], outs[1][key], atol=1e-6)

    def test_random_corpora_full_coverage(self, model_dir, tmp_path):
        words = ["sys", "hello", "ok", "beep", "east", "west"]
        for trial in range(4):
            rng = np.random.default_rng(900 + trial)
            dialogues = []
            for d in range(int(rng.integers(1, 6))):
                turns = [
                    (" ".join(rng.choice(words, rng.integers(1, 5))),
                     " ".join(rng.choice(words, rng.integers(1, 5))))
                    for _ in range(int(rng.integers(1, 5)))
                ]
                dialogues.append((f"r{trial}-{d}", turns))
            p = tmp_path / f"r{trial}.jsonl"
            write_dialogues(p, dialogues)
            out = tmp_path / f"r{trial}.bin"
            export(ExportJob(input_path=str(p), model_id=model_dir,
                             out_path=str(out), batch_size=2))
            _, recs, _ = read_store(out)
            expect = {(did, i + 1) for did, turns in dialogues
                      for i in range(len(turns))}
            assert set(recs) == expect


class TestCli:
    def test_end_to_end(self, toy_jsonl, model_dir, tmp_path, capsys):
        out = tmp_path / "cli.bin"
        rc = cli_main(["--input", str(toy_jsonl), "--model", model_dir,
                       "--out", str(out), "--max-len", "32", "-q"])
        assert rc == 0
        assert "wrote 6 records" in capsys.readouterr().out
        assert read_store(out)[0] == 8

    def test_usage_error_is_1(self, capsys):
        rc = cli_main(["--input", "x.jsonl"])
        assert rc == 1
        assert "error" in capsys.readouterr().err

    def test_missing_input_is_1(self, model_dir, tmp_path, capsys):
        rc = cli_main(["--input", str(tmp_path / "none.jsonl"),
                       "--model", model_dir,
                       "--out", str(tmp_path / "o.bin")])
        assert rc == 1
