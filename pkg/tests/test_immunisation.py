import numpy as np
import pytest

from immune import (
    N_DIMS,
    ImmunisationError,
    SchemaError,
    SyntheticSpec,
    VersionMismatchError,
    export_immunisation,
    generate_synthetic_traces,
    import_immunisation,
    train,
)


@pytest.fixture(scope="module")
def model():
    return train(generate_synthetic_traces(SyntheticSpec(n_normal=20, n_abnormal=0, length=64, seed=4)))


@pytest.fixture(scope="module")
def document(model):
    return export_immunisation(model, 0.75)


def test_export_import_export_is_stable(document):
    model, prior = import_immunisation(document)
    assert prior == 0.75
    assert export_immunisation(model, prior) == document


def test_imported_model_matches(model, document):
    imported, _ = import_immunisation(document)
    assert np.array_equal(imported.prototypes, model.prototypes)
    assert np.array_equal(imported.center, model.center)
    assert np.array_equal(imported.scale, model.scale)
    assert imported.threshold == model.threshold
    assert imported.beta == model.beta


def test_imported_model_gives_same_verdicts(model, document):
    imported, _ = import_immunisation(document)
    rng = np.random.default_rng(0)
    raw = model.center + rng.normal(scale=3.0, size=(1000, N_DIMS)) * model.scale
    assert np.array_equal(model.distances(raw), imported.distances(raw))
    assert np.array_equal(model.distances(raw) <= model.threshold,
                          imported.distances(raw) <= imported.threshold)


def test_document_layout(document):
    assert document.startswith('<?xml version="1.0" encoding="utf-8"?>\n<immunisation version="1">')
    assert document.count("<prototype ") == 20
    assert '<dim name="cpu_mean"' in document


def test_missing_threshold(document):
    broken = "\n".join(line for line in document.splitlines() if "<threshold" not in line)
    with pytest.raises(SchemaError):
        import_immunisation(broken)


def test_version_mismatch(document):
    with pytest.raises(VersionMismatchError):
        import_immunisation(document.replace('version="1">', 'version="2">', 1))


@pytest.mark.parametrize("broken", [
    "<immunisation version='1'>",
    "<model version='1'/>",
    "<immunisation/>",
])
def test_malformed_documents(broken):
    with pytest.raises(SchemaError):
        import_immunisation(broken)


def test_non_numeric_value(document):
    with pytest.raises(SchemaError):
        import_immunisation(document.replace('<beta value="', '<beta value="x', 1))


def test_negative_threshold(document, model):
    threshold = format(model.threshold, ".17g")
    with pytest.raises(ImmunisationError):
        import_immunisation(document.replace(f'<threshold value="{threshold}"', '<threshold value="-1"', 1))


def test_export_rejects_bad_prior(model):
    with pytest.raises(ValueError):
        export_immunisation(model, 0.0)
