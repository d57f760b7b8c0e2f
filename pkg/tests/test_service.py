import pytest
from fastapi.testclient import TestClient

from cogscreen.active_loop import AnnotationService, LoopConfig, StubBackend
from cogscreen.corpus import strip_labels
from cogscreen.service import create_app


@pytest.fixture()
def client(tmp_path, small_corpus, small_clean, lexicon):
    unlabeled = strip_labels(small_corpus, keep_fraction=0.3, seed=2)
    cfg = LoopConfig(min_age=65, uncertainty_delta=0.2, batch_size=4,
                     retrain_after=100)
    service = AnnotationService(unlabeled, small_clean, lexicon,
                                StubBackend(small_clean), cfg,
                                tmp_path / "labels.journal")
    return TestClient(create_app(service))


class TestReviewApi:
    def test_iterate_then_checkout(self, client):
        r = client.post("/api/iterate")
        assert r.status_code == 200
        body = r.json()
        assert len(body["created_tasks"]) == 4
        assert body["queue"]["pending"] == 4

        r = client.get("/api/tasks/next", params={"annotator": "ann"})
        assert r.status_code == 200
        task = r.json()["task"]
        assert task is not None
        assert task["status"] == "assigned"
        assert r.json()["remaining"] == 3
        # both highlight layers present somewhere in the payload
        segs = [s for note in task["notes"] for s in note["segments"]]
        assert any(s["regex_tags"] for s in segs)
        assert any(s["attention_weight"] is not None for s in segs)

    def test_task_text_reconstruction(self, client, small_corpus):
        client.post("/api/iterate")
        task = client.get("/api/tasks/next").json()["task"]
        patient = small_corpus.get(task["patient_id"])
        raw_by_id = {n.note_id: n.text for n in patient.notes}
        for note in task["notes"]:
            joined = "".join(s["text"] for s in note["segments"])
            assert joined == raw_by_id[note["note_id"]]

    def test_get_by_id_and_404(self, client):
        client.post("/api/iterate")
        task = client.get("/api/tasks/next").json()["task"]
        r = client.get(f"/api/tasks/{task['task_id']}")
        assert r.status_code == 200
        assert r.json()["task_id"] == task["task_id"]
        assert client.get("/api/tasks/T90909").status_code == 404

    def test_label_persists_in_metrics(self, client):
        client.post("/api/iterate")
        task = client.get("/api/tasks/next").json()["task"]
        before = client.get("/api/metrics").json()["labels_submitted"]
        r = client.post(f"/api/tasks/{task['task_id']}/label",
                        json={"label": "present", "annotator": "ann"})
        assert r.status_code == 200
        after = client.get("/api/metrics").json()
        assert after["labels_submitted"] == before + 1
        assert after["queue"]["labeled"] == 1

    def test_double_submit_idempotent(self, client):
        client.post("/api/iterate")
        task = client.get("/api/tasks/next").json()["task"]
        url = f"/api/tasks/{task['task_id']}/label"
        r1 = client.post(url, json={"label": "absent"})
        r2 = client.post(url, json={"label": "absent"})
        assert r1.status_code == r2.status_code == 200
        assert r2.json()["labels_submitted"] == r1.json()["labels_submitted"]

    def test_conflict_is_409(self, client):
        client.post("/api/iterate")
        task = client.get("/api/tasks/next").json()["task"]
        url = f"/api/tasks/{task['task_id']}/label"
        client.post(url, json={"label": "absent"})
        r = client.post(url, json={"label": "present"})
        assert r.status_code == 409

    def test_label_unknown_task_404(self, client):
        r = client.post("/api/tasks/T90909/label", json={"label": "present"})
        assert r.status_code == 404

    def test_invalid_label_rejected(self, client):
        client.post("/api/iterate")
        task = client.get("/api/tasks/next").json()["task"]
        r = client.post(f"/api/tasks/{task['task_id']}/label",
                        json={"label": "maybe"})
        assert r.status_code == 422

    def test_queue_advances_to_empty(self, client):
        client.post("/api/iterate")
        seen = []
        while True:
            body = client.get("/api/tasks/next").json()
            if body["task"] is None:
                break
            seen.append(body["task"]["task_id"])
            client.post(f"/api/tasks/{body['task']['task_id']}/label",
                        json={"label": "absent"})
        assert len(seen) == 4
        assert client.get("/api/metrics").json()["queue"]["pending"] == 0

    def test_skip_endpoint(self, client):
        client.post("/api/iterate")
        task = client.get("/api/tasks/next").json()["task"]
        r = client.post(f"/api/tasks/{task['task_id']}/skip")
        assert r.status_code == 200
        assert r.json()["status"] == "skipped"
