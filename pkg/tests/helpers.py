from diva.data import SynthConfig, generate_synthetic
from diva.mining import BatchSpec
from diva.model import EncoderConfig
from diva.trainer import TrainConfig

TINY_SYNTH = SynthConfig(n_train_classes=6, n_test_classes=4, samples_per_class=8, obs_dim=10)


def tiny_dataset(**kw):
    from dataclasses import replace

    return generate_synthetic(replace(TINY_SYNTH, **kw))


def tiny_cfg(**kw):
    base = dict(
        encoder=EncoderConfig(hidden_dims=[12], feature_dim=8),
        embed_dim=4,
        batch=BatchSpec(n_classes=4, m_per_class=3),
        epochs=2,
        lr=1e-3,
        queue_size=16,
        eval_every=0,
    )
    base.update(kw)
    return TrainConfig(**base)


# acceptance criteria report: one line per criterion, printed at session end
RESULTS: list[str] = []


class criterion:
    """Record PASS/FAIL for one acceptance criterion around a block of asserts."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number:2d} {status}: {self.title}"
        if self.detail:
            line += f" [{self.detail}]"
        if exc_type is not None and exc is not None and str(exc):
            line += f" -- {str(exc).splitlines()[0]}"
        RESULTS.append(line)
        print(line)
        return False
