import json

import pytest
from hypothesis import given, strategies as st

from pbf_rag.dataset import (
    AnomalyTaxonomy,
    StageImage,
    TestSample as LayerSample,
    decode_one_hot,
    encode_one_hot,
    load_ground_truth,
    load_samples,
    load_taxonomy,
)
from pbf_rag.errors import DatasetError

ADDUP_ANOMALIES = [
    "Recoater Hopping",
    "Recoater Streaking",
    "Incomplete Spreading",
    "Swelling",
    "Debris",
    "Super-Elevation",
    "Soot",
    "Misprint",
]


def write_config(path, dataset_id="addup-formup-350", anomalies=None):
    payload = {
        "dataset_id": dataset_id,
        "anomalies": ADDUP_ANOMALIES if anomalies is None else anomalies,
    }
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


class TestLoadTaxonomy:
    def test_eight_anomaly_config(self, tmp_path):
        taxonomy = load_taxonomy(write_config(tmp_path / "cfg.json"))
        assert len(taxonomy) == 8
        assert taxonomy.anomalies[0] == "Recoater Hopping"
        assert taxonomy.anomalies[-1] == "Misprint"
        assert taxonomy.index_of("Soot") == 6

    def test_duplicate_name_rejected(self, tmp_path):
        path = write_config(tmp_path / "cfg.json", anomalies=["Soot", "Soot"])
        with pytest.raises(DatasetError, match="duplicate anomaly name"):
            load_taxonomy(path)

    def test_duplicate_is_case_insensitive(self, tmp_path):
        path = write_config(tmp_path / "cfg.json", anomalies=["Soot", "soot"])
        with pytest.raises(DatasetError, match="duplicate anomaly name"):
            load_taxonomy(path)

    def test_empty_list_rejected(self, tmp_path):
        path = write_config(tmp_path / "cfg.json", anomalies=[])
        with pytest.raises(DatasetError, match="empty anomaly list"):
            load_taxonomy(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(DatasetError, match="not found"):
            load_taxonomy(tmp_path / "absent.json")

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"dataset_id": "x", "anomalies": ["A"], "extra": 1}))
        with pytest.raises(DatasetError, match="unknown keys"):
            load_taxonomy(path)


def write_annotations(path, rows, with_images=True):
    payload = []
    for sample_id, anomalies in rows:
        entry = {"sample_id": sample_id, "anomalies": anomalies}
        entry["images"] = (
            {"post_melting": f"{sample_id}_m.png", "post_spreading": f"{sample_id}_s.png"}
            if with_images
            else {}
        )
        payload.append(entry)
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


class TestLoadGroundTruth:
    @pytest.fixture()
    def taxonomy(self, tmp_path):
        return load_taxonomy(write_config(tmp_path / "cfg.json"))

    def test_direct_parse(self, tmp_path, taxonomy):
        path = write_annotations(tmp_path / "ann.json", [("L0042", ["Debris", "Soot"])])
        truth = load_ground_truth(path, taxonomy)
        assert truth == {"L0042": frozenset({"Debris", "Soot"})}

    def test_unknown_label_names_sample_and_label(self, tmp_path, taxonomy):
        path = write_annotations(tmp_path / "ann.json", [("L0001", ["Porosityy"])])
        with pytest.raises(DatasetError, match=r"L0001.*Porosityy"):
            load_ground_truth(path, taxonomy)

    def test_twenty_six_samples(self, tmp_path, taxonomy):
        rows = [(f"L{i:04d}", ["Soot"] if i % 2 else []) for i in range(26)]
        truth = load_ground_truth(write_annotations(tmp_path / "ann.json", rows), taxonomy)
        assert len(truth) == 26

    def test_normal_layer_maps_to_empty_set(self, tmp_path, taxonomy):
        path = write_annotations(tmp_path / "ann.json", [("L0000", [])])
        assert load_ground_truth(path, taxonomy)["L0000"] == frozenset()

    def test_duplicate_sample_rejected(self, tmp_path, taxonomy):
        path = write_annotations(tmp_path / "ann.json", [("L1", []), ("L1", [])])
        with pytest.raises(DatasetError, match="duplicate sample_id"):
            load_ground_truth(path, taxonomy)


class TestLoadSamples:
    def test_missing_stage_image_rejected(self, tmp_path):
        taxonomy = load_taxonomy(write_config(tmp_path / "cfg.json"))
        path = tmp_path / "ann.json"
        path.write_text(
            json.dumps(
                [{"sample_id": "L1", "images": {"post_melting": "m.png"}, "anomalies": []}]
            )
        )
        (tmp_path / "m.png").write_bytes(b"x")
        with pytest.raises(DatasetError, match="missing its post_spreading image"):
            load_samples(path, taxonomy)

    def test_loads_both_stages_with_descriptions(self, tmp_path):
        taxonomy = load_taxonomy(write_config(tmp_path / "cfg.json"))
        path = write_annotations(tmp_path / "ann.json", [("L1", ["Soot"])])
        for suffix in ("m", "s"):
            (tmp_path / f"L1_{suffix}.png").write_bytes(b"px")
        samples = load_samples(path, taxonomy)
        assert len(samples) == 1
        melt, spread = samples[0].ordered_images()
        assert melt.stage_description == "image captured post-melting"
        assert spread.stage_description == "image captured after powder spreading"
        assert samples[0].ground_truth == frozenset({"Soot"})


class TestStageImage:
    def test_description_is_derived(self):
        image = StageImage.for_stage("post_melting", "x.png")
        assert image.stage_description == "image captured post-melting"

    def test_wrong_description_rejected(self):
        with pytest.raises(DatasetError):
            StageImage(stage="post_melting", image_ref="x.png", stage_description="nope")

    def test_sample_requires_one_image_per_stage(self, tmp_path):
        melt = StageImage.for_stage("post_melting", tmp_path / "m.png")
        with pytest.raises(DatasetError, match="exactly one"):
            LayerSample("L1", "d", (melt, melt), frozenset())


class TestOneHot:
    taxonomy = AnomalyTaxonomy(dataset_id="t", anomalies=("A", "B", "C"))

    def test_single_member(self):
        assert encode_one_hot({"B"}, self.taxonomy).bits == (0, 1, 0)

    def test_empty_set(self):
        assert encode_one_hot(set(), self.taxonomy).bits == (0, 0, 0)

    def test_full_set(self):
        assert encode_one_hot({"A", "B", "C"}, self.taxonomy).bits == (1, 1, 1)

    def test_unknown_member_rejected(self):
        with pytest.raises(DatasetError, match="not in taxonomy"):
            encode_one_hot({"Z"}, self.taxonomy)

    def test_input_enumeration_order_is_irrelevant(self):
        assert (
            encode_one_hot(["C", "A"], self.taxonomy).bits
            == encode_one_hot(["A", "C"], self.taxonomy).bits
            == (1, 0, 1)
        )


NAMES = ("Recoater Hopping", "Soot", "Debris", "Swelling", "Misprint")
TAXONOMY5 = AnomalyTaxonomy(dataset_id="p", anomalies=NAMES)


@given(st.sets(st.sampled_from(NAMES)))
def test_round_trip(truth):
    vector = encode_one_hot(truth, TAXONOMY5)
    assert decode_one_hot(vector, TAXONOMY5) == frozenset(truth)


@given(st.sets(st.sampled_from(NAMES)))
def test_popcount_matches_set_size(truth):
    assert encode_one_hot(truth, TAXONOMY5).popcount() == len(truth)
