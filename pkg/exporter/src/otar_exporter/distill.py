"""Synthetic datasets and toy-scale distillation fine-tuning."""

import os

import torch
import torch.nn as nn
from torch.utils.data import DataLoader, TensorDataset


class DatasetMissingError(FileNotFoundError):
    pass


def make_dataset(path, samples=1000, classes=4, channels=3, size=16, seed=0,
                 noise=0.6):
    """Labeled Gaussian-template images: class templates plus iid noise."""
    gen = torch.Generator().manual_seed(seed)
    templates = torch.randn(classes, channels, size, size, generator=gen)
    labels = torch.randint(0, classes, (samples,), generator=gen)
    images = templates[labels] + noise * torch.randn(
        samples, channels, size, size, generator=gen)
    torch.save({"x": images.float(), "y": labels.long()}, path)
    return path


def load_dataset(path):
    if not os.path.exists(path):
        raise DatasetMissingError(f"dataset file not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    return TensorDataset(blob["x"], blob["y"])


@torch.no_grad()
def accuracy(model, dataset, batch_size=128):
    model.eval()
    hits = 0
    for x, y in DataLoader(dataset, batch_size=batch_size):
        hits += (model(x).argmax(dim=1) == y).sum().item()
    return hits / len(dataset)


def finetune_distill(student, teacher, dataset_path, epochs, lr=0.01,
                     momentum=0.9, batch_size=64, seed=0):
    """Train the student to match the teacher's logits (mean-squared error).

    Returns a per-epoch log of distillation loss and student accuracy on
    the dataset's labels. Toy scale only: full-batch epochs over a small
    local dataset, CPU.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    dataset = load_dataset(dataset_path)
    teacher.eval()
    student.train()
    torch.manual_seed(seed)
    optimizer = torch.optim.SGD(student.parameters(), lr=lr, momentum=momentum,
                                nesterov=True)
    criterion = nn.MSELoss()
    log = []
    for epoch in range(epochs):
        total = 0.0
        batches = 0
        for x, _ in DataLoader(dataset, batch_size=batch_size, shuffle=True,
                               generator=torch.Generator().manual_seed(seed + epoch)):
            with torch.no_grad():
                target = teacher(x)
            optimizer.zero_grad()
            loss = criterion(student(x), target)
            loss.backward()
            optimizer.step()
            total += loss.item()
            batches += 1
        log.append({
            "epoch": epoch + 1,
            "distill_loss": total / max(batches, 1),
            "student_accuracy": accuracy(student, dataset),
        })
        student.train()
    student.eval()
    return log
