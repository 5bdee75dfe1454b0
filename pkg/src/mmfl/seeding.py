"""Counter-based seed derivation.

Every random stream in an experiment comes from the single root ``seed``:
``derive_seed(root, stream, *counters)`` hashes the stream name with CRC32 and
feeds (root, crc, *counters) to numpy's SeedSequence, taking the first 32-bit
word of its state. Streams used by the federation runner:

  "split"        train/test split
  "partition"    client partition
  "train-mask"   per-client training mask, counter = client index
  "eval-mask"    server test mask, counter = evaluation index
  "init"         global model initialization
  "sample"       client sampling, counter = round
  "local"        local shuffling, counters = (round, client)
  "pad"          fresh controls padding a broadcast profile, counters = (round, client)
  "pad-eval"     padding of the global profile for server-side evaluation
"""

import zlib

import numpy as np


def derive_seed(root: int, stream: str, *counters: int) -> int:
    key = [int(root) & 0xFFFFFFFF, zlib.crc32(stream.encode("utf-8"))]
    key += [int(c) for c in counters]
    return int(np.random.SeedSequence(key).generate_state(1)[0])
