import pytest

from spotsim.costmodel import PerfProfile, PriceSheet, load_profile
from spotsim.data import bundled_path
from spotsim.domain import ModelSpec


@pytest.fixture(scope="session")
def gpt_profile():
    return load_profile(bundled_path("gpt-20b"))


@pytest.fixture(scope="session")
def opt_profile():
    return load_profile(bundled_path("opt-6.7b"))


@pytest.fixture(scope="session")
def llama_profile():
    return load_profile(bundled_path("llama-30b"))


def make_profile(t_dec=0.1, t_init=2.0, shapes=((1, 1, 1),), eta=1.0, bandwidth=1e9,
                 latency=0.0, model=None, s_in_ref=512, prices=(1.9, 3.9),
                 local_ratio=1.45, remote_ratio=9.54, baseline=10.0):
    """Small synthetic profile; every listed (P,M,B) shape shares the costs."""
    if model is None:
        model = ModelSpec(name="toy", num_layers=4, bytes_per_layer=1000,
                          kv_bytes_per_token_per_layer=8)
    decode = {tuple(s): t_dec for s in shapes}
    prefill = {tuple(s): {s_in_ref: t_init} for s in shapes}
    return PerfProfile(
        model=model,
        decode_table=decode,
        prefill_table=prefill,
        pipeline_efficiency=eta,
        bandwidth=bandwidth,
        transfer_latency=latency,
        prices=PriceSheet(spot_usd_per_hour=prices[0], ondemand_usd_per_hour=prices[1]),
        local_restart_ratio=local_ratio,
        remote_restart_ratio=remote_ratio,
        restart_baseline_s=baseline,
    )
