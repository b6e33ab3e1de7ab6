"""Word-count job and its sequential oracle, shared by several test modules."""

import random
import zlib
from collections import Counter

from mrbsp.core import MapReduceJob

WORDS = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta",
         "iota", "kappa", "lambda", "mu"]


def lines_source(node, local):
    if local is None:
        return []
    return zip(range(local.offset, local.stop), local.elements)


def split_words(k1, line):
    return [(w, 1) for w in line.split()]


def hash_partition(key, n_nodes):
    return zlib.crc32(str(key).encode()) % n_nodes


def sum_counts(key, values):
    return (key, sum(values))


def word_count_job(partition=hash_partition):
    return MapReduceJob(source=lines_source, mapper=split_words,
                        partition=partition, reducer=sum_counts, name="wordcount")


def random_lines(seed, n_lines=200, max_words=12):
    rng = random.Random(seed)
    return [" ".join(rng.choice(WORDS) for _ in range(rng.randint(0, max_words)))
            for _ in range(n_lines)]


def oracle(lines):
    return Counter(w for line in lines for w in line.split())


def counts_of(result):
    out = Counter()
    for node_pairs in result.results:
        for pair in node_pairs:
            assert pair.key not in out, "key reduced on two nodes"
            out[pair.key] = pair.value
    return out
