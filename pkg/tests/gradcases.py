"""Miniature finite-difference cases shared by the unit and acceptance suites."""
import torch

from bias_asd.config import ModelConfig
from bias_asd.encoders import AudioEncoder, VisualBackbone, VisualEncoder
from bias_asd.fusion import BIASModel, total_loss
from bias_asd.nn_blocks import BasicBlock, DSConv1d, MultiHeadSelfAttention, SEBlock, weighted_cross_entropy
from oracles import finite_difference_check, module_check

EPS = 1e-4
TOL = 1e-4
# Networks with ReLU and max-pool kinks need a smaller step so the central
# difference does not straddle a kink. At that step an O(1) loss is resolved
# to about 1e-10 per unit gradient, so gradients below KINK_FLOOR are compared
# against KINK_FLOOR instead of their own magnitude.
KINK_EPS = 1e-6
KINK_FLOOR = 1e-6
# Attention key biases shift every score of a query by the same amount, which
# softmax ignores: their gradient is exactly zero and central differences only
# see rounding noise. They are checked separately for a vanishing gradient.
ZERO_GRAD = ("k.bias",)


def _g(seed):
    return torch.Generator().manual_seed(seed)


def _rand(*shape, seed=0):
    return torch.randn(*shape, generator=_g(seed), dtype=torch.float64)


def _tiny_cfg(**kw):
    base = dict(visual_widths=(4, 4, 4, 8), visual_blocks=(1, 1, 1, 1), audio_widths=(4, 4, 4, 8),
                audio_blocks=(1, 1, 1, 1), temporal_layers=2, embed_dim=8, se_reduction=2, heads=2,
                crop_size=16)
    base.update(kw)
    return ModelConfig(**base)


def case_se():
    torch.manual_seed(1)
    return module_check(SEBlock(8, 2), [_rand(3, 8, 5, seed=1)], eps=EPS)


def case_se_masked():
    torch.manual_seed(2)
    keep = torch.tensor([True, False] * 4)
    block = SEBlock(8, 2)
    return module_check(_Bound(block, keep=keep), [_rand(2, 8, 4, seed=2)], eps=EPS)


def case_dsconv():
    torch.manual_seed(3)
    return module_check(DSConv1d(6, 6, norm_act=True), [_rand(2, 6, 7, seed=3)], eps=EPS)


def case_dsconv_projecting():
    torch.manual_seed(4)
    return module_check(DSConv1d(4, 6, residual=False), [_rand(2, 4, 5, seed=4)], eps=EPS)


def case_attention():
    torch.manual_seed(5)
    return module_check(MultiHeadSelfAttention(8, 2), [_rand(2, 5, 8, seed=5)], eps=EPS, exclude=ZERO_GRAD)


def case_basic_block():
    torch.manual_seed(6)
    return module_check(BasicBlock(3, 4, stride=2, se_reduction=2), [_rand(2, 3, 6, 6, seed=6)], eps=EPS)


def case_visual_backbone():
    torch.manual_seed(7)
    net = VisualBackbone((4, 4, 4, 8), (1, 1, 1, 1), se_reduction=2)
    return module_check(_Field(net, "embedding"), [_rand(2, 3, 3, 16, 16, seed=7)], eps=KINK_EPS,
                        floor=KINK_FLOOR)


def case_visual_encoder():
    torch.manual_seed(8)
    net = VisualEncoder(_tiny_cfg())
    return module_check(_Index(net, 0), [_rand(2, 3, 3, 16, 16, seed=8)], eps=EPS, exclude=ZERO_GRAD)


def case_audio_encoder():
    torch.manual_seed(9)
    net = AudioEncoder((4, 4, 4, 8), (1, 1, 1, 1), se_reduction=2, embed_dim=8)
    return module_check(net, [_rand(2, 3, 4, 13, seed=9)], eps=KINK_EPS, floor=KINK_FLOOR)


def case_loss():
    logits = _rand(2, 4, 2, seed=10).requires_grad_()
    aux = {m: _rand(2, 4, 2, seed=11 + i).requires_grad_() for i, m in enumerate(("audio", "face", "body"))}
    labels = torch.tensor([[0, 1, 1, 0], [1, 1, 0, 0]])
    fn = lambda: total_loss(logits, aux, labels, 1.0, (0.4, 0.4, 0.4), (0.7, 1.3))  # noqa: E731
    return finite_difference_check(fn, [logits, *aux.values()], eps=EPS)


def case_weighted_ce():
    logits = _rand(3, 5, 2, seed=14).requires_grad_()
    labels = torch.tensor([[0, 1, 1, 0, 1]] * 3)
    return finite_difference_check(lambda: weighted_cross_entropy(logits, labels, (2.0, 0.5)), [logits], eps=EPS)


def case_full_model():
    torch.manual_seed(15)
    model = BIASModel(_tiny_cfg()).double()
    face, body = _rand(2, 3, 3, 16, 16, seed=15), _rand(2, 3, 3, 16, 16, seed=16)
    mfcc = _rand(2, 3, 4, 13, seed=17)
    labels = torch.tensor([[0, 1, 1], [1, 0, 0]])

    def loss():
        out = model(face, body, mfcc)
        return total_loss(out.logits, out.aux_logits, labels)

    params = [p for n, p in model.named_parameters() if p.requires_grad and not n.endswith(ZERO_GRAD)]
    return finite_difference_check(loss, params, eps=KINK_EPS, max_coords=6, floor=KINK_FLOOR)


class _Bound(torch.nn.Module):
    def __init__(self, inner, **kw):
        super().__init__()
        self.inner, self.kw = inner, kw

    def forward(self, *x):
        return self.inner(*x, **self.kw)


class _Field(torch.nn.Module):
    def __init__(self, inner, name):
        super().__init__()
        self.inner, self.name = inner, name

    def forward(self, *x):
        return getattr(self.inner(*x), self.name)


class _Index(torch.nn.Module):
    def __init__(self, inner, index):
        super().__init__()
        self.inner, self.index = inner, index

    def forward(self, *x):
        return self.inner(*x)[self.index]


CASES = {
    "se_block": case_se,
    "se_block_masked": case_se_masked,
    "dsconv1d_residual": case_dsconv,
    "dsconv1d_projecting": case_dsconv_projecting,
    "self_attention": case_attention,
    "basic_block_se": case_basic_block,
    "visual_backbone": case_visual_backbone,
    "visual_encoder": case_visual_encoder,
    "audio_encoder": case_audio_encoder,
    "weighted_cross_entropy": case_weighted_ce,
    "total_loss": case_loss,
    "full_model": case_full_model,
}
