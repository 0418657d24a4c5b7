from tests.test_data import (
    LoggingSetup,
    batch_from_matrix,
    orthonormal_basis,
    random_dictionary,
    small_phantom_spec,
    sparse_codes,
    unit_columns,
)
from em_superres import (
    Dictionary,
    LearnConfig,
    PatchSpec,
    SolverConfig,
    encode,
    extract_patches,
    generate_phantom,
    learn_dictionary,
    load_dictionary,
    patch_origins,
    representation_stats,
    save_dictionary,
    update_dictionary_step,
)
from em_superres.dictionary import objective
from em_superres.exceptions import ConfigurationError, DegenerateDataError, MalformedHeaderError, NormViolationError
from em_superres.helpers import hash_array
import numpy as np
import pytest
import json

CUBE = PatchSpec(h=3, v=3, stride=(1, 1, 1))
TINY = PatchSpec(h=2, v=2, stride=(1, 1, 1))


def _phantom_patches():
    volume = generate_phantom(small_phantom_spec(dims=(12, 12, 12)))
    return extract_patches(volume, CUBE)


class TestDictionary(LoggingSetup):
    def test_identical_patches(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0.5, 1.5, size=CUBE.n)
        batch = batch_from_matrix(np.tile(x[:, None], (1, 50)), CUBE)

        dictionary = learn_dictionary(batch, LearnConfig(k=1, lambda_=1e-6, n_epochs=3))
        cosine = abs(float(dictionary.atoms[:, 0] @ x)) / np.linalg.norm(x)
        assert cosine >= 0.999

    def test_objective_never_increases(self):
        patches = _phantom_patches()
        config = LearnConfig(k=2 * CUBE.n, lambda_=0.1, n_epochs=4, plateau_tol=0.0)
        dictionary = learn_dictionary(patches, config)

        trace = dictionary.provenance.objective_trace
        assert len(trace) == dictionary.provenance.iterations
        assert len(trace) >= 2
        assert all(later <= earlier * (1.0 + 1e-9) for earlier, later in zip(trace, trace[1:]))
        assert np.allclose(np.linalg.norm(dictionary.atoms, axis=0), 1.0, atol=1e-10)

    def test_objective_never_increases_at_scale(self):
        spec = PatchSpec(h=3, v=5, stride=(1, 1, 1))
        volume = generate_phantom(small_phantom_spec(dims=(20, 20, 20), n_membranes=6))
        origins = patch_origins(volume.dims, spec)[:5000]
        patches = extract_patches(volume, spec, origins)
        dictionary = learn_dictionary(patches, LearnConfig(k=2 * spec.n, lambda_=0.1, n_epochs=4, plateau_tol=0.0))

        trace = dictionary.provenance.objective_trace
        assert patches.count == 5000
        assert len(trace) >= 2
        assert all(later <= earlier * (1.0 + 1e-9) for earlier, later in zip(trace, trace[1:]))

    def test_represents_unseen_phantom(self):
        spec = PatchSpec(h=3, v=5, stride=(1, 1, 1))
        training = generate_phantom(small_phantom_spec(dims=(20, 20, 20), seed=3, n_membranes=6))
        unseen = generate_phantom(small_phantom_spec(dims=(20, 20, 20), seed=11, n_membranes=6))
        dictionary = learn_dictionary(
            extract_patches(training, spec), LearnConfig(k=2 * spec.n, lambda_=0.1, n_epochs=5)
        )

        sparse_lattice = PatchSpec(h=3, v=5, stride=(2, 2, 2))
        active, error = representation_stats(dictionary, extract_patches(unseen, sparse_lattice), 0.1)
        assert error <= 0.15
        assert 0.0 < active < dictionary.k

    def test_provenance(self):
        patches = _phantom_patches()
        dictionary = learn_dictionary(patches, LearnConfig(k=30, lambda_=0.1, n_epochs=2))
        provenance = dictionary.provenance

        assert provenance.lambda_ == 0.1
        assert provenance.dataset_hash == hash_array(patches.matrix)
        assert 0.0 < provenance.mean_active_atoms <= 30
        assert 0.0 <= provenance.mean_relative_error < 1.0
        assert dictionary.spec == CUBE

    def test_deterministic(self):
        patches = _phantom_patches()
        config = LearnConfig(k=30, lambda_=0.1, n_epochs=2, seed=4)

        first = learn_dictionary(patches, config)
        second = learn_dictionary(patches, config, workers=2)
        assert np.array_equal(first.atoms, second.atoms)
        assert first.provenance.objective_trace == second.provenance.objective_trace

    def test_online_mode(self):
        patches = _phantom_patches()
        config = LearnConfig(k=30, lambda_=0.1, n_epochs=2, mode="online", batch_size=128)
        dictionary = learn_dictionary(patches, config)

        assert dictionary.k == 30
        assert 1 <= len(dictionary.provenance.objective_trace) <= 2
        assert np.allclose(np.linalg.norm(dictionary.atoms, axis=0), 1.0, atol=1e-10)

    def test_recovers_generators(self):
        generators = orthonormal_basis(TINY.n, seed=1)
        X = generators @ sparse_codes(TINY.n, 400, 2, seed=2)

        rng = np.random.default_rng(3)
        start = Dictionary(spec=TINY, atoms=unit_columns(generators + 0.05 * rng.standard_normal(generators.shape)))
        config = LearnConfig(k=TINY.n, lambda_=0.01, n_epochs=30, init="provided", plateau_tol=0.0, solver_tol=1e-10)
        dictionary = learn_dictionary(batch_from_matrix(X, TINY), config, initial=start)

        similarity = np.abs(generators.T @ dictionary.atoms)
        assert np.all(similarity.max(axis=1) >= 0.99)

    def test_update_single_atom(self):
        x = np.random.default_rng(4).standard_normal(TINY.n)
        atoms = unit_columns(np.random.default_rng(5).standard_normal((TINY.n, 1)))

        updated = update_dictionary_step(atoms, np.ones((1, 6)), np.tile(x[:, None], (1, 6)))
        assert np.allclose(updated[:, 0], x / np.linalg.norm(x), atol=1e-12)

    def test_dead_atom_replaced(self):
        e0, e1 = np.eye(TINY.n)[0], np.eye(TINY.n)[1]
        X = np.stack([e0, e0, e0, 5.0 * e1], axis=1)
        codes = np.array([[1.0, 1.0, 1.0, 0.0], [0.0, 0.0, 0.0, 0.0]])
        atoms = unit_columns(np.random.default_rng(6).standard_normal((TINY.n, 2)))

        updated = update_dictionary_step(atoms, codes, X)
        assert np.allclose(updated[:, 0], e0, atol=1e-12)
        assert np.allclose(updated[:, 1], e1, atol=1e-12)

    def test_update_lowers_objective(self):
        rng = np.random.default_rng(7)
        X = rng.standard_normal((CUBE.n, 200))
        dictionary = random_dictionary(CUBE, 40, seed=8)
        codes = np.stack([code.coeffs for code in encode(dictionary, X, 0.1)], axis=1)

        updated = update_dictionary_step(dictionary.atoms, codes, X, passes=2)
        assert objective(updated, codes, X, 0.1) <= objective(dictionary.atoms, codes, X, 0.1) + 1e-9
        assert np.allclose(np.linalg.norm(updated, axis=0), 1.0, atol=1e-12)

    def test_encode_orthonormal(self):
        dictionary = Dictionary(spec=TINY, atoms=orthonormal_basis(TINY.n, seed=9))
        X = np.stack([dictionary.atoms[:, 3], np.zeros(TINY.n)], axis=1)
        codes = encode(dictionary, X, 0.01)

        assert codes[0].n_nonzero == 1
        assert codes[0].coeffs[3] == pytest.approx(0.99, abs=1e-12)
        assert codes[1].n_nonzero == 0
        assert codes[1].objective == 0.0

    def test_residual_grows_with_lambda(self):
        dictionary = random_dictionary(CUBE, 2 * CUBE.n, seed=10)
        X = np.random.default_rng(11).standard_normal((CUBE.n, 20))
        config = SolverConfig(tol=1e-12, max_iter=100000)

        errors = []
        for lambda_ in (0.5, 0.1, 0.02):
            codes = np.stack([code.coeffs for code in encode(dictionary, X, lambda_, config=config)], axis=1)
            errors.append(float(np.linalg.norm(X - dictionary.atoms @ codes)))
        assert errors[0] >= errors[1] - 1e-9
        assert errors[1] >= errors[2] - 1e-9

    def test_representation_stats(self):
        dictionary = Dictionary(spec=TINY, atoms=orthonormal_basis(TINY.n, seed=12))
        X = np.random.default_rng(13).standard_normal((TINY.n, 10))
        X[:, 0] = 0.0

        active, error = representation_stats(dictionary, X, 1e-9)
        assert error < 1e-12
        assert active == pytest.approx(0.9 * TINY.n)

    def test_invalid_training_sets(self):
        with pytest.raises(DegenerateDataError):
            learn_dictionary(batch_from_matrix(np.zeros((TINY.n, 10)), TINY), LearnConfig(k=2))

        X = np.random.default_rng(14).standard_normal((TINY.n, 5))
        with pytest.raises(ConfigurationError):
            learn_dictionary(batch_from_matrix(X, TINY), LearnConfig(k=6))

        with pytest.raises(ConfigurationError):
            learn_dictionary(batch_from_matrix(X, TINY), LearnConfig(k=2, init="provided"))

    def test_round_trip(self, tmp_path):
        dictionary = learn_dictionary(_phantom_patches(), LearnConfig(k=30, lambda_=0.1, n_epochs=2))
        json_path, raw_path = save_dictionary(dictionary, tmp_path / "dict")

        assert raw_path.stat().st_size == CUBE.n * 30 * 8
        header = json.loads(json_path.read_text())
        assert header["format"] == "VD1"
        assert header["patch"] == [3, 3, 3]

        loaded = load_dictionary(tmp_path / "dict")
        assert np.array_equal(loaded.atoms, dictionary.atoms)
        assert loaded.spec == dictionary.spec
        assert loaded.provenance.objective_trace == dictionary.provenance.objective_trace

    def test_corrupted_files(self, tmp_path):
        json_path, raw_path = save_dictionary(random_dictionary(TINY, 4, seed=15), tmp_path / "dict")

        atoms = np.frombuffer(raw_path.read_bytes(), dtype="<f8").copy()
        atoms[: TINY.n] *= 1.01
        raw_path.write_bytes(atoms.tobytes())
        with pytest.raises(NormViolationError):
            load_dictionary(json_path)

        header = json.loads(json_path.read_text())
        json_path.write_text(json.dumps({**header, "patch": [2, 3, 2]}))
        with pytest.raises(MalformedHeaderError):
            load_dictionary(json_path)
