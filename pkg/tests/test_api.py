import numpy as np
import pytest
from fastapi.testclient import TestClient

from invtrain.main import app
from invtrain.models import Network, predict, save_checkpoint
from invtrain.schemas import TrainConfig
from invtrain.scm import confounded_chip_graph
from invtrain.services import load_model


@pytest.fixture
def client():
    return TestClient(app)


@pytest.fixture
def served_network(tmp_path, monkeypatch):
    net = Network(side=16, num_classes=3, hidden_channels=2, c_feat=4, seed=1)
    path = tmp_path / "checkpoint.bin"
    save_checkpoint(net, path, TrainConfig(epochs=1, warmup_epochs=0))
    monkeypatch.setenv("INVTRAIN_CHECKPOINT", str(path))
    load_model.cache_clear()
    yield net
    load_model.cache_clear()


def scm_body(**overrides):
    body = {
        "graph": confounded_chip_graph(0.9, num_classes=3).to_document().model_dump(mode="json"),
        "treatment": "X",
        "outcome": "Y",
        "adjust": ["N"],
    }
    body.update(overrides)
    return body


def test_scm_check(client):
    response = client.post("/scm/check", json=scm_body(value=1))
    assert response.status_code == 200
    report = response.json()
    assert report["backdoor_criterion"] is True
    assert [state["value"] for state in report["states"]] == [1]
    assert np.allclose(report["states"][0]["adjusted"], report["states"][0]["interventional"], atol=1e-10)


def test_scm_check_without_adjustment(client):
    report = client.post("/scm/check", json=scm_body(adjust=[])).json()
    assert report["backdoor_criterion"] is False
    assert report["confounding_gap"] > 0


def test_scm_check_domain_error(client):
    response = client.post("/scm/check", json=scm_body(outcome="Q"))
    assert response.status_code == 422
    assert "UnknownNodeError" in response.json()["error"]


def test_scm_check_invalid_body(client):
    response = client.post("/scm/check", json={"treatment": "X"})
    assert response.status_code == 400
    assert "graph" in response.json()["error"]


def test_model_without_checkpoint(client, monkeypatch):
    monkeypatch.delenv("INVTRAIN_CHECKPOINT", raising=False)
    response = client.get("/model")
    assert response.status_code == 503
    assert "INVTRAIN_CHECKPOINT" in response.json()["error"]


def test_model_with_unreadable_checkpoint(client, monkeypatch, tmp_path):
    monkeypatch.setenv("INVTRAIN_CHECKPOINT", str(tmp_path / "missing.bin"))
    load_model.cache_clear()
    assert client.get("/model").status_code == 503


def test_model_header(client, served_network):
    header = client.get("/model").json()
    assert header["side"] == 16
    assert header["num_classes"] == 3
    assert header["config"]["epochs"] == 1


def test_predict(client, served_network):
    image = np.random.default_rng(0).random((16, 16))
    response = client.post("/predict", json={"image": image.tolist()})
    assert response.status_code == 200
    body = response.json()
    assert body["label"] == predict(served_network, image[None])
    assert len(body["logits"]) == 3
    mask = np.asarray(body["mask"])
    assert mask.shape == (8, 8)
    assert mask.min() >= 0.0 and mask.max() <= 1.0


def test_predict_wrong_side(client, served_network):
    response = client.post("/predict", json={"image": np.zeros((8, 8)).tolist()})
    assert response.status_code == 422
    assert "ShapeMismatchError" in response.json()["error"]
