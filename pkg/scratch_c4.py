import time

import numpy as np

from longlab import bpe
from longlab.model import AttentionConfig, Batch, HeadConfig, ModelConfig, apply_head, encode_sequence, init_model
from longlab.optim import OptimizerState, lr_at
from longlab.textprep import SynthSpec, synth_corpus_with_annotations
from longlab.training import top_k_ids, training_step

CUES = list("!#$%&(),:;<=>?@^")
TARGETS = list("\"'*+-./[\\]_`{|}~")
assert len(CUES) == 16 and len(TARGETS) == 16 and not set(CUES) & set(TARGETS)
RULES = dict(zip(CUES, TARGETS))

spec = SynthSpec(num_docs=256, doc_length_tokens=1152, vocab_words=36,
                 dependency_distance=1024, dependency_rules=RULES, seed=20)
docs, meta = synth_corpus_with_annotations(spec)
tok = bpe.train_bpe(docs[:4], 260)
CUE_IDS = np.array(sorted(bpe.encode(tok, c)[0] for c in CUES))

def enc(d):
    return np.array(bpe.encode(tok, d.text, add_specials=True), dtype=np.int64)

def tpos(m):
    return 1 + 2 * m["target_pos"]

def gmask_of(ids):
    g = np.isin(ids, CUE_IDS)
    g[0] = True
    return g

train_docs, train_meta = docs[:192], meta[:192]
held_docs, held_meta = docs[192:], meta[192:]
encoded = [enc(d) for d in train_docs]
positions = [tpos(m) for m in train_meta]
for ids, m, p in zip(encoded, train_meta, positions):
    assert bpe.decode(tok, [ids[p]]) == m["target"]

cfg = ModelConfig(vocab_size=tok.vocab_size, max_positions=4096, d_model=32,
                  num_layers=2, num_heads=2, d_ff=64,
                  attention=AttentionConfig(kind="longformer", window_radius=64, global_tokens=(0,)),
                  head=HeadConfig(kind="mlm"))
ckpt = init_model(cfg, seed=0)
ckpt.optimizer = OptimizerState(ckpt.params, lr=5e-3)

def heldout_top5(window=None):
    hits = 0
    for d, m in zip(held_docs, held_meta):
        ids = enc(d)
        p = tpos(m)
        true = ids[p]
        ids[p] = bpe.MASK_ID
        if window is not None:
            core = ids[1:-1]
            rel = p - 1
            lo = max(0, rel - (window - 3))
            piece = core[lo : rel + 1]
            ids = np.concatenate([[bpe.CLS_ID], piece, [bpe.SEP_ID]])
            p = len(piece)
        batch = Batch(token_ids=ids[None, :], pad_mask=np.zeros((1, len(ids)), bool),
                      global_mask=gmask_of(ids)[None, :])
        logits = apply_head(ckpt, encode_sequence(ckpt, batch)).data[0]
        if true in top_k_ids(logits[p], 5):
            hits += 1
    return hits / len(held_docs)

B = 8
spe = len(encoded) // B
max_epochs = 12
total = spe * max_epochs
t0 = time.time()
step = 0
for epoch in range(max_epochs):
    order = np.random.default_rng([7, epoch]).permutation(len(encoded))
    for k in range(spe):
        idxs = order[k * B : (k + 1) * B]
        L = max(len(encoded[i]) for i in idxs)
        ids = np.full((B, L), bpe.PAD_ID, dtype=np.int64)
        pad = np.ones((B, L), dtype=bool)
        gm = np.zeros((B, L), dtype=bool)
        labels = np.full((B, L), -100, dtype=np.int64)
        for r, i in enumerate(idxs):
            seq = encoded[i].copy()
            p = positions[i]
            labels[r, p] = seq[p]
            seq[p] = bpe.MASK_ID
            ids[r, : len(seq)] = seq
            pad[r, : len(seq)] = False
            gm[r, : len(seq)] = gmask_of(seq)
        loss = training_step(ckpt, Batch(token_ids=ids, pad_mask=pad, global_mask=gm,
                                         labels=labels), lr_at(step, 5e-3, 20, total))
        step += 1
    print(f"epoch {epoch+1}: loss={loss:.3f} elapsed={time.time()-t0:.0f}s", flush=True)
    if epoch >= 3:
        acc = heldout_top5()
        print(f"  heldout top5 = {acc:.3f} ({time.time()-t0:.0f}s)", flush=True)
        if acc >= 0.95:
            break

print("FINAL long-context:", heldout_top5(), flush=True)
print("FINAL truncated-512:", heldout_top5(window=512), flush=True)
print("total seconds:", time.time() - t0, flush=True)
