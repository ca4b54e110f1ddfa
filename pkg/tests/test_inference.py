import json

import numpy as np
import pytest
from PIL import Image

import ssta.checkpoint as checkpoint
from ssta.checkpoint import load_network, load_node, save_network, topology_of
from ssta.dataset import Dataset
from ssta.errors import CheckpointError, ConfigError
from ssta.experiments import dump_frames, to_gray8
from ssta.inference import evaluate, evaluate_checkpoint, run_receding
from ssta.node_model import ModelConfig, NodeModel, NodeRuntime, zero_params
from ssta.protocol import build_network
from ssta.scheduler import training_round
from ssta.world import build_topology

CONFIG = ModelConfig(height=8, width=8, hidden_channels=2, msg_dim=3, kernel_size=3)


@pytest.fixture
def dataset(tiny_world):
    return Dataset.generate(tiny_world, 20)


def network(dataset, zero=False):
    topology = build_topology(dataset.views, 2)
    params = {i: zero_params(CONFIG) for i in topology} if zero else None
    return build_network(topology, CONFIG, seed=1, lr=1e-2, params=params)


def test_zero_network_predicts_mid_gray(dataset):
    agents = network(dataset, zero=True)
    models = {i: a.model for i, a in agents.items()}
    params = {i: a.params for i, a in agents.items()}
    report = evaluate(models, params, dataset, horizon=2, start=0, end=dataset.length)
    for i in dataset.view_ids:
        targets = np.stack([dataset.frames[i][t + 1:t + 3] for t in range(0, 18)])
        assert report.per_view[i].mse == pytest.approx(float(np.mean((targets - 0.5) ** 2)), rel=1e-12)
    assert np.isnan(report.per_view[1].ssim)


def test_receding_inference_matches_runtimes(dataset):
    agents = network(dataset)
    models = {i: a.model for i, a in agents.items()}
    params = {i: a.params for i, a in agents.items()}
    steps = list(run_receding(models, params, dataset, 3, 6, horizon=2))
    assert [t for t, _ in steps] == [3, 4, 5]

    runtimes = {i: NodeRuntime(models[i], params[i], 2) for i in models}
    for t, results in steps:
        sent = {i: r.emit() for i, r in runtimes.items()}
        for i, runtime in runtimes.items():
            incoming = {s: sent[s] for s in models[i].senders}
            if t == 3:
                expected = runtime.rollout(dataset.frames[i][t], incoming)
            else:
                runtime.commit()
                expected = runtime.rollout(dataset.frames[i][t], incoming)
            assert np.array_equal(results[i].predictions, expected.predictions)


def test_evaluation_needs_room_for_the_horizon(dataset):
    agents = network(dataset)
    models = {i: a.model for i, a in agents.items()}
    params = {i: a.params for i, a in agents.items()}
    with pytest.raises(ConfigError):
        evaluate(models, params, dataset, horizon=5, start=15)
    with pytest.raises(ConfigError):
        next(run_receding(models, params, dataset, 0, 1, 2, msg_mode="shouted"))


def test_checkpoint_round_trip(dataset, tmp_path):
    agents = network(dataset)
    windows = {i: np.stack([dataset.window(i, 0, 2)]) for i in agents}
    training_round(agents, windows, 0)
    save_network(str(tmp_path), agents, {"epoch": 1, "msg_mode": "emerged"})

    nodes, meta = load_network(str(tmp_path))
    assert meta["epoch"] == 1
    assert topology_of(nodes) == {i: a.model.neighbors for i, a in agents.items()}
    for i, agent in agents.items():
        assert np.array_equal(nodes[i].params.flat, agent.params.flat)
        assert nodes[i].params.version == 1
        assert nodes[i].config == CONFIG
        assert np.array_equal(nodes[i].optimizer_state["adam.exp_avg"], agent.optimizer.exp_avg)

    report = evaluate_checkpoint(str(tmp_path), dataset, horizon=2)
    models = {i: a.model for i, a in agents.items()}
    params = {i: a.params for i, a in agents.items()}
    expected = evaluate(models, params, dataset, horizon=2)
    for i in agents:
        assert report.per_view[i].mse == expected.per_view[i].mse


def test_checkpoint_errors(dataset, tmp_path):
    with pytest.raises(CheckpointError):
        load_network(str(tmp_path))
    save_network(str(tmp_path), network(dataset))
    manifest = tmp_path / "node_2" / "manifest.json"
    payload = json.loads(manifest.read_text())
    payload["hyperparameters"]["hidden_channels"] = 5
    manifest.write_text(json.dumps(payload))
    with pytest.raises(CheckpointError, match="node 2"):
        load_node(str(tmp_path), 2)


def test_interrupted_save_is_refused(dataset, tmp_path, monkeypatch):
    agents = network(dataset)
    save_network(str(tmp_path), agents, {"epoch": 1})
    windows = {i: np.stack([dataset.window(i, 0, 2)]) for i in agents}
    training_round(agents, windows, 0)

    real_save_node = checkpoint.save_node

    def crash_on_node_2(ckpt_dir, node_id, *args, **kwargs):
        if node_id == 2:
            raise OSError("disk full")
        return real_save_node(ckpt_dir, node_id, *args, **kwargs)

    monkeypatch.setattr(checkpoint, "save_node", crash_on_node_2)
    with pytest.raises(OSError):
        save_network(str(tmp_path), agents, {"epoch": 2})
    with pytest.raises(CheckpointError, match=r"incomplete: nodes \[1\]"):
        load_network(str(tmp_path))

    monkeypatch.setattr(checkpoint, "save_node", real_save_node)
    save_network(str(tmp_path), agents, {"epoch": 2})
    nodes, meta = load_network(str(tmp_path))
    assert meta["epoch"] == 2
    assert np.array_equal(nodes[2].params.flat, agents[2].params.flat)


def test_dump_frames_writes_pairs(dataset, tmp_path):
    ckpt = tmp_path / "ckpt"
    save_network(str(ckpt), network(dataset, zero=True), {"msg_mode": "emerged"})
    out = tmp_path / "frames"
    index = dump_frames(str(ckpt), dataset, t=4, horizon=1, out_dir=str(out))
    assert len(index["files"]) == 2 * len(dataset.view_ids)
    assert (out / "index.json").exists()
    pred = np.asarray(Image.open(out / "view3_t00005_pred.png"))
    assert pred.shape == (8, 8) and np.all(pred == 128)
    truth = np.asarray(Image.open(out / "view3_t00005_gt.png"))
    assert np.array_equal(truth, to_gray8(dataset.frames[3][5]))
    with pytest.raises(ConfigError):
        dump_frames(str(ckpt), dataset, t=19, horizon=1, out_dir=str(out))


def test_gray_levels():
    assert to_gray8(np.array([0.0, 0.5, 1.0, 1.2])).tolist() == [0, 128, 255, 255]
