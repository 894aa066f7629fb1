import torch

from ambicodec.gradcheck import CHECKS, TOLERANCE, fd_gradient, relative_error, run_checks


def test_fd_gradient_of_quadratic():
    x = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    g = fd_gradient(lambda: (x ** 2).sum() + 3 * x[0], x)
    torch.testing.assert_close(g, 2 * x + torch.tensor([3.0, 0, 0], dtype=torch.float64), rtol=0, atol=1e-8)


def test_relative_error_is_norm_wise():
    a = torch.tensor([1.0, 0.0])
    assert relative_error(a, a) == 0.0
    assert abs(relative_error(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])) - 2 ** 0.5) < 1e-7


def test_every_backward_is_covered():
    assert set(CHECKS) == {"conv1d", "conv_transpose1d", "snake", "rvq_straight_through", "mel_loss",
                           "covariance_loss", "adversarial_losses"}


def test_checks_pass_on_a_few_instances():
    for r in run_checks(instances=3, seed=5):
        assert r.instances == 3
        assert r.max_relative_error <= TOLERANCE, r


def test_detects_a_wrong_backward():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x ** 3

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 2 * x ** 2  # should be 3 x^2

    x = torch.tensor([0.7, -1.3], dtype=torch.float64, requires_grad=True)
    Wrong.apply(x).sum().backward()
    assert relative_error(x.grad, fd_gradient(lambda: Wrong.apply(x).sum(), x)) > TOLERANCE
