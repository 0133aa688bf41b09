"""Train/gallery/probe bookkeeping for the benchmark protocols."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

from .errors import ManifestError
from .synthetic import CASIA_B_VIEWS

CASIA_B_PROBES = {"NM": ("NM", (5, 6)), "BG": ("BG", (1, 2)), "CL": ("CL", (1, 2))}
OU_MVLP_TEST_VIEWS = (0.0, 30.0, 60.0, 90.0)


@dataclass(frozen=True)
class ProtocolSpec:
    """Which subjects train, and which recordings form the gallery and probe sets.

    ``gallery`` / ``probe`` are ``(condition, seq_indices)`` rules applied to
    the test subjects.  ``views`` restricts evaluation to those angles
    (``None`` keeps every view present).
    """

    name: str
    train_subjects: int | None = None
    test_subjects: int | None = None
    gallery: tuple = ("NM", (1, 2, 3, 4))
    probe: tuple = ("NM", (5, 6))
    views: tuple | None = None
    exclude_identical_views: bool = True

    def to_dict(self):
        d = asdict(self)
        d["gallery"] = [self.gallery[0], list(self.gallery[1])]
        d["probe"] = [self.probe[0], list(self.probe[1])]
        d["views"] = None if self.views is None else list(self.views)
        return d

    @property
    def uses_manifest_splits(self):
        return self.train_subjects is None


def casia_b(variant="NM"):
    """First 74 subjects train; NM 1-4 gallery; probes NM 5-6, BG 1-2 or CL 1-2."""
    variant = variant.upper()
    if variant not in CASIA_B_PROBES:
        raise ValueError(f"CASIA-B variant must be one of {sorted(CASIA_B_PROBES)}")
    return ProtocolSpec(f"CASIA-B-{variant}", 74, 50, ("NM", (1, 2, 3, 4)), CASIA_B_PROBES[variant],
                        CASIA_B_VIEWS, True)


def ou_mvlp():
    """5153 training / 5154 test subjects; session 01 gallery, session 00 probe; 4 views."""
    return ProtocolSpec("OU-MVLP", 5153, 5154, ("NM", (1,)), ("NM", (0,)), OU_MVLP_TEST_VIEWS, True)


def custom(exclude_identical_views=True, views=None):
    """Use the split column of the manifest as-is."""
    return ProtocolSpec("custom", None, None, ("", ()), ("", ()), views, exclude_identical_views)


def by_name(name):
    upper = name.upper()
    if upper == "CASIA-B":
        return casia_b("NM")
    if upper.startswith("CASIA-B-"):
        return casia_b(upper[len("CASIA-B-"):])
    if upper == "OU-MVLP":
        return ou_mvlp()
    if name == "custom":
        return custom()
    raise ValueError(f"unknown protocol {name!r}")


def _subject_order(entries):
    def key(s):
        return (0, int(s), s) if s.isdigit() else (1, 0, s)

    return sorted({e.subject for e in entries}, key=key)


@dataclass
class Partition:
    training: list = field(default_factory=list)
    gallery: list = field(default_factory=list)
    probe: list = field(default_factory=list)
    train_subjects: list = field(default_factory=list)
    test_subjects: list = field(default_factory=list)

    def tagged(self):
        """Entries re-tagged with their split; unused entries are dropped."""
        return ([replace(e, split="Training") for e in self.training]
                + [replace(e, split="Gallery") for e in self.gallery]
                + [replace(e, split="Probe") for e in self.probe])


def partition(entries, spec):
    """Assign manifest entries to Training / Gallery / Probe under ``spec``."""
    entries = list(entries)
    if spec.uses_manifest_splits:
        part = Partition(
            training=[e for e in entries if e.split == "Training"],
            gallery=[e for e in entries if e.split == "Gallery"],
            probe=[e for e in entries if e.split == "Probe"],
        )
        part.train_subjects = _subject_order(part.training)
        part.test_subjects = _subject_order(part.gallery + part.probe)
        if spec.views is not None:
            keep = set(spec.views)
            part.gallery = [e for e in part.gallery if e.view in keep]
            part.probe = [e for e in part.probe if e.view in keep]
        return part

    subjects = _subject_order(entries)
    need = spec.train_subjects + (spec.test_subjects or 0)
    if spec.test_subjects is not None and len(subjects) < need:
        raise ManifestError([(0, f"{spec.name} needs {need} subjects, manifest has {len(subjects)}")])
    train = set(subjects[: spec.train_subjects])
    test_list = subjects[spec.train_subjects:]
    if spec.test_subjects is not None:
        test_list = test_list[: spec.test_subjects]
    test = set(test_list)
    views = None if spec.views is None else set(spec.views)
    g_cond, g_idx = spec.gallery
    p_cond, p_idx = spec.probe

    part = Partition(train_subjects=sorted(train, key=subjects.index), test_subjects=test_list)
    for e in entries:
        if e.subject in train:
            part.training.append(e)
        elif e.subject in test and (views is None or e.view in views):
            if e.condition == g_cond and e.seq_index in g_idx:
                part.gallery.append(e)
            elif e.condition == p_cond and e.seq_index in p_idx:
                part.probe.append(e)
    return part
