import pytest
import torch

from model_export.arch import RRDBNet


def make_checkpoint(path, scale, features=16, blocks=2, growth=8, channels=3, seed=0,
                    wrapper="params_ema"):
    torch.manual_seed(seed)
    net = RRDBNet(num_in_ch=channels, num_out_ch=channels, scale=scale,
                  num_feat=features, num_block=blocks, num_grow_ch=growth)
    state = net.state_dict()
    blob = {wrapper: state} if wrapper else state
    torch.save(blob, path)
    return path


@pytest.fixture(scope="session")
def checkpoints(tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpts")
    return {
        4: make_checkpoint(d / "gen_x4.pth", 4, features=32, blocks=4, growth=16, seed=0),
        2: make_checkpoint(d / "gen_x2.pth", 2, features=16, blocks=2, growth=8, seed=1),
    }
