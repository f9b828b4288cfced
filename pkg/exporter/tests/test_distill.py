import copy
import time

import pytest
import torch

from otar_exporter import otar
from otar_exporter.assemble import assemble_model
from otar_exporter.distill import (
    DatasetMissingError,
    accuracy,
    finetune_distill,
    load_dataset,
    make_dataset,
)
from otar_exporter.export import export_model, read_mapping
from otar_exporter.models import build
from util import compressed_entries, exact_cp_factors


@pytest.fixture(scope="module")
def dataset_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "toy.pt"
    make_dataset(path, samples=1000, classes=4, channels=3, size=16, seed=0)
    return path


class TestDataset:
    def test_make_and_load(self, dataset_path):
        dataset = load_dataset(dataset_path)
        assert len(dataset) == 1000
        x, y = dataset[0]
        assert x.shape == (3, 16, 16)
        assert 0 <= int(y) < 4

    def test_missing_dataset_raises(self, tmp_path):
        with pytest.raises(DatasetMissingError):
            load_dataset(tmp_path / "nope.pt")

    def test_generation_is_seeded(self, tmp_path):
        a = tmp_path / "a.pt"
        b = tmp_path / "b.pt"
        make_dataset(a, samples=50, seed=3)
        make_dataset(b, samples=50, seed=3)
        da, db = load_dataset(a), load_dataset(b)
        assert torch.equal(da.tensors[0], db.tensors[0])
        assert torch.equal(da.tensors[1], db.tensors[1])


class TestFinetuneDistill:
    def test_epochs_must_be_positive(self, dataset_path):
        model = build("toycnn")
        with pytest.raises(ValueError):
            finetune_distill(model, build("toycnn"), dataset_path, epochs=0)

    def test_teacher_equals_student_control(self, dataset_path):
        torch.manual_seed(5)
        teacher = build("toycnn")
        teacher.eval()
        student = copy.deepcopy(teacher)
        before = accuracy(teacher, load_dataset(dataset_path))
        log = finetune_distill(student, teacher, dataset_path, epochs=1, lr=0.01)
        after = log[-1]["student_accuracy"]
        assert abs(after - before) <= 0.005
        assert log[-1]["distill_loss"] <= 1e-10

    def test_one_epoch_on_1000_samples_is_fast(self, dataset_path, tmp_path):
        torch.manual_seed(6)
        teacher = build("toycnn")
        teacher.eval()
        archive = tmp_path / "m.otar"
        mapping_path = tmp_path / "map.json"
        export_model(teacher, archive, mapping_path)
        tensors = otar.load(archive)
        mapping = read_mapping(mapping_path)
        factors = [exact_cp_factors(tensors[layer["archive_name"]])
                   for layer in mapping["layers"]]
        comp = tmp_path / "c.otar"
        otar.save(comp, compressed_entries(factors, "cp"))
        student = copy.deepcopy(teacher)
        assemble_model(student, comp, mapping)

        start = time.time()
        log = finetune_distill(student, teacher, dataset_path, epochs=1, lr=0.005)
        elapsed = time.time() - start
        assert elapsed < 300.0
        assert len(log) == 1
        assert 0.0 <= log[0]["student_accuracy"] <= 1.0

    def test_distillation_recovers_perturbed_student(self, dataset_path):
        torch.manual_seed(7)
        teacher = build("toycnn")
        teacher.eval()
        student = copy.deepcopy(teacher)
        with torch.no_grad():
            for p in student.parameters():
                p += 0.05 * torch.randn_like(p)
        data = load_dataset(dataset_path)
        with torch.no_grad():
            x = data.tensors[0][:200]
            before = torch.nn.functional.mse_loss(student(x), teacher(x)).item()
        log = finetune_distill(student, teacher, dataset_path, epochs=3, lr=0.02)
        with torch.no_grad():
            after = torch.nn.functional.mse_loss(student(x), teacher(x)).item()
        assert after < before
        assert log[-1]["distill_loss"] < log[0]["distill_loss"]
