"""Build the bundled KJV word-level corpus under data/.

Requires the ``pythonbible-kjv`` wheel (public-domain King James text)::

    pip install pythonbible-kjv
    python scripts/make_corpus.py
"""
import argparse
import pathlib
import re

VERSE_NO = re.compile(r"\b\d+\.\s")
PUNCT = re.compile(r"([,;:.?!()'])")


def paragraphs():
    import pythonbible_kjv  # noqa: F401  (locates the data module)

    path = pathlib.Path(pythonbible_kjv.__file__).with_name("plain_text_bible.py")
    src = path.read_text(encoding="utf-8")
    start = src.index('"""') + 3
    body = src[start:src.index('"""', start)]
    for line in body.split("\n"):
        line = VERSE_NO.sub(" ", line).replace("[", "").replace("]", "")
        line = PUNCT.sub(r" \1 ", line)
        toks = line.split()
        if toks:
            yield " ".join(toks)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data")
    ap.add_argument("--train-bytes", type=int, default=1_000_000)
    ap.add_argument("--heldout-bytes", type=int, default=110_000)
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    budget = {"train": args.train_bytes, "valid": args.heldout_bytes, "test": args.heldout_bytes}
    split_names = list(budget)
    buf = {k: [] for k in split_names}
    used = {k: 0 for k in split_names}
    cur = 0
    for para in paragraphs():
        name = split_names[cur]
        buf[name].append(para)
        used[name] += len(para) + 1
        if used[name] >= budget[name]:
            cur += 1
            if cur == len(split_names):
                break
    for name in split_names:
        (out / f"kjv.{name}.txt").write_text("\n".join(buf[name]) + "\n", encoding="utf-8")
        print(name, used[name], "bytes", sum(len(p.split()) for p in buf[name]), "tokens")


if __name__ == "__main__":
    main()
