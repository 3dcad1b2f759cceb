"""Online association with bidirectional-softmax similarity.

Each frame's kept segments get an embedding from the track head. The
similarity between a new embedding and a stored track averages a softmax
over stored tracks and a softmax over new embeddings, so a match must be
mutual to score high. Pairs are taken greedily above a threshold; everything
else opens a new id.

Here the embeddings are hand-made so the behaviour is easy to read.

    python demos/04_tracking.py
"""
import torch

from polydvps.tracker import TrackEmbedding, TrackMemory, associate, bidirectional_similarity

a, b, c = torch.eye(3)[0] * 4, torch.eye(3)[1] * 4, torch.eye(3)[2] * 4

print("similarity of {a, b} to {a, b}:")
print(bidirectional_similarity(torch.stack([a, b]), torch.stack([a, b])).numpy().round(3))

mem = TrackMemory()
frames = [
    [TrackEmbedding(a, 0, 0, cls=2), TrackEmbedding(b, 0, 1, cls=3)],
    [TrackEmbedding(b + 0.3, 1, 0, cls=3), TrackEmbedding(a - 0.2, 1, 1, cls=2)],  # order swapped
    [TrackEmbedding(a, 2, 0, cls=2), TrackEmbedding(c, 2, 1, cls=2)],  # b leaves, c enters
    [TrackEmbedding(b, 3, 0, cls=3)],  # b returns after a one-frame gap
    [TrackEmbedding(b, 4, 0, cls=2)],  # b-like embedding, but class 2 cannot join track 2
]
for t, cur in enumerate(frames):
    ids, mem = associate(mem, cur, threshold=0.3)
    print(f"frame {t}: ids {ids}, live tracks {sorted(mem.tracks)}")

# With a single new embedding the softmax over new embeddings is exactly 1, so
# every same-class track scores at least 0.5 and clears the threshold. The
# class gate, not the similarity, is what kept the last frame off track 2.
cur = torch.stack([b])
mem_vecs = torch.stack([mem.tracks[i].smoothed for i in sorted(mem.tracks)])
print("single-entry similarities to stored tracks:", bidirectional_similarity(cur, mem_vecs).numpy().round(3))
