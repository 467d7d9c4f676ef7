"""Convert citation datasets into the edges/features/labels layout read by graphae.

Supported inputs:
  * `<name>.cites` + `<name>.content` (Cora, Citeseer)
  * `Pubmed-Diabetes.DIRECTED.cites.tab` + `Pubmed-Diabetes.NODE.paper.tab`

Output directory gets `edges.txt` (`u v`), `features.txt` (`node feature value`
triplets, nonzeros only) and `labels.txt` (`node label`). Nodes without any
edge are dropped, as are citations to papers missing from the node file.

    python python/prepare_planetoid.py cora/ data/cora
    python python/prepare_planetoid.py Pubmed-Diabetes/data/ data/pubmed
"""

import argparse
import sys
from pathlib import Path


def read_content(path):
    feats, labels = {}, {}
    with open(path) as f:
        for line in f:
            toks = line.split()
            if not toks:
                continue
            node, values, label = toks[0], toks[1:-1], toks[-1]
            feats[node] = {j: float(v) for j, v in enumerate(values) if float(v) != 0.0}
            labels[node] = label
    return feats, labels


def read_cites(path):
    with open(path) as f:
        return [tuple(line.split()[:2]) for line in f if line.strip()]


def read_pubmed_nodes(path):
    feats, labels, vocab = {}, {}, {}
    with open(path) as f:
        next(f)
        for tok in next(f).split("\t"):
            if tok.startswith("numeric:"):
                word = tok.split(":")[1]
                vocab.setdefault(word, len(vocab))
        for line in f:
            toks = line.rstrip("\n").split("\t")
            if len(toks) < 2:
                continue
            node, row = toks[0], {}
            for tok in toks[1:]:
                key, _, value = tok.partition("=")
                if key == "label":
                    labels[node] = value
                elif key in vocab and float(value) != 0.0:
                    row[vocab[key]] = float(value)
            feats[node] = row
    return feats, labels


def read_pubmed_cites(path):
    edges = []
    with open(path) as f:
        next(f)
        next(f)
        for line in f:
            toks = line.split("\t")
            if len(toks) >= 4:
                edges.append((toks[1].split(":", 1)[1].strip(), toks[3].split(":", 1)[1].strip()))
    return edges


def locate(src):
    pubmed_nodes = list(src.glob("*NODE.paper.tab"))
    if pubmed_nodes:
        feats, labels = read_pubmed_nodes(pubmed_nodes[0])
        return feats, labels, read_pubmed_cites(next(src.glob("*cites.tab")))
    content = next(src.glob("*.content"), None)
    cites = next(src.glob("*.cites"), None)
    if content is None or cites is None:
        sys.exit(f"no .content/.cites or Pubmed .tab files in {src}")
    feats, labels = read_content(content)
    return feats, labels, read_cites(cites)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("src", type=Path, help="directory with the raw files")
    ap.add_argument("out", type=Path, help="output directory")
    args = ap.parse_args()

    feats, labels, cites = locate(args.src)
    edges, seen, dangling, loops = [], set(), 0, 0
    for u, v in cites:
        if u not in feats or v not in feats:
            dangling += 1
            continue
        if u == v:
            loops += 1
            continue
        key = (min(u, v), max(u, v))
        if key not in seen:
            seen.add(key)
            edges.append((u, v))
    nodes = sorted({x for e in edges for x in e})

    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "edges.txt", "w") as f:
        f.writelines(f"{u} {v}\n" for u, v in edges)
    with open(args.out / "features.txt", "w") as f:
        for node in nodes:
            f.writelines(f"{node} {j} {x!r}\n" for j, x in sorted(feats[node].items()))
    with open(args.out / "labels.txt", "w") as f:
        f.writelines(f"{node} {labels[node]}\n" for node in nodes)

    print(f"{len(nodes)} nodes, {len(edges)} edges, {len(set(labels[n] for n in nodes))} classes; "
          f"dropped {len(feats) - len(nodes)} isolated nodes, {dangling} dangling and {loops} self citations")


if __name__ == "__main__":
    main()
