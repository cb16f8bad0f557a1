"""Shared oracles and the acceptance verdict registry."""
from selfens import augment, data, losses, trainer
from selfens.nn import adam_step, backward, forward

VERDICTS: list[str] = []


def verdict(number, title, ok, detail=""):
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
    VERDICTS.append(line)
    print(line)
    return ok


def digest(store):
    return b"".join(p.value.tobytes() for p in store.params.values()) + b"".join(
        b.tobytes() for b in store.buffers.values()
    )


def plain_supervised(source, spec, c, src_aug=augment.TF):
    """Reference loop: source cross-entropy only, same random streams."""
    student, _ = trainer.init_pair(spec, c.seed)
    for e in range(c.epochs):
        rngs = trainer.epoch_rngs(c.seed, e)
        for idx in data.batch_iter(source.train, c.batch_size, rngs.src_batches):
            x = augment.augment_batch(source.train.images[idx], src_aug, rngs.src_aug)
            probs, cache = forward(spec, student, x, "train", rngs.src_dropout)
            backward(cache, losses.cross_entropy_grad(probs, source.train.labels[idx]), student)
            adam_step(student, c.lr, c.adam_beta1, c.adam_beta2, c.adam_eps)
            student.zero_grad()
    return student
