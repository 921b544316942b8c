from __future__ import annotations

import torch
import torch.nn.functional as F


def focal_loss_smoothed(logits, labels, gamma=2.0, smoothing=0.05):
    """Focal loss against label-smoothed targets, averaged over the batch.

    Per sample: sum_c y~_c * (1 - p_c)^gamma * (-log p_c), with
    y~ = (1 - smoothing) * onehot + smoothing / n_classes.
    """
    n_classes = logits.shape[-1]
    logp = F.log_softmax(logits, dim=-1)
    p = logp.exp()
    target = F.one_hot(labels.long(), n_classes).to(logits.dtype)
    target = (1 - smoothing) * target + smoothing / n_classes
    per_class = target * (1 - p).pow(gamma) * (-logp)
    return per_class.sum(-1).mean()


def supcon_loss(embeddings, labels, temperature=0.07):
    """Supervised contrastive loss over L2-normalized embeddings.

    Returns ``(loss, n_anchors)``. Anchors without a same-label partner are
    skipped; with none left the loss is a graph-connected zero and
    ``n_anchors == 0``.
    """
    B = embeddings.shape[0]
    labels = labels.view(-1)
    sim = embeddings @ embeddings.T / temperature
    eye = torch.eye(B, dtype=torch.bool, device=embeddings.device)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    n_pos = pos.sum(1)
    anchors = n_pos > 0
    if not anchors.any():
        return embeddings.sum() * 0.0, 0
    sim = sim.masked_fill(eye, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    log_prob = log_prob.masked_fill(~pos, 0.0)
    per_anchor = -log_prob.sum(1)[anchors] / n_pos[anchors].to(embeddings.dtype)
    return per_anchor.mean(), int(anchors.sum())
