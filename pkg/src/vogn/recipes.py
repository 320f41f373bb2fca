"""Published hyperparameter settings and their desk-scale stand-ins."""
from .data import AugmentationSpec
from .optimizers import Hyperparams

# CIFAR-10: pad 32x32 to 40x40, random 28x28 crop, random flip
CIFAR_AUGMENTATION = AugmentationSpec(pad=4, crop=28, hflip=True)
CIFAR_RHO = 10
IMAGENET_RHO = 5
CIFAR_N = 50_000
IMAGENET_N = 1_281_167


def cifar_alexnet(optimizer="vogn"):
    if optimizer == "adam":
        return Hyperparams(lr=1e-3, decay_epochs=(80, 120), beta1=0.1, beta2=0.001, weight_decay=1e-4)
    if optimizer == "vogn":
        return Hyperparams(lr=1e-4, decay_epochs=(80, 120), beta1=0.9, beta2=0.999, prior_prec=0.5,
                           damping=1e-3, tau=1.0, tau_init=0.5, tau_warmup_epochs=10,
                           mc_samples=3, rho=CIFAR_RHO)
    raise ValueError(optimizer)


def cifar_resnet18(optimizer="vogn"):
    if optimizer == "adam":
        return Hyperparams(lr=1e-3, decay_epochs=(80, 120), beta1=0.1, beta2=0.001, weight_decay=5e-4)
    if optimizer == "vogn":
        return Hyperparams(lr=1e-4, decay_epochs=(80, 120), beta1=0.9, beta2=0.999, prior_prec=50,
                           damping=1e-3, mc_samples=5, rho=CIFAR_RHO)
    raise ValueError(optimizer)


def imagenet_resnet18(optimizer="vogn"):
    decay = (15, 30, 45) if optimizer == "noisy-kfac" else (30, 60, 80)
    if optimizer == "sgd":
        return Hyperparams(lr=1.6, lr_init=1.25e-2, lr_warmup_epochs=5, decay_epochs=decay, beta1=0.9, l2=1e-4)
    if optimizer == "adam":
        return Hyperparams(lr=1.6e-3, lr_init=1.25e-5, lr_warmup_epochs=5, decay_epochs=decay,
                           beta1=0.1, beta2=0.001, weight_decay=1e-4)
    if optimizer == "ogn":
        return Hyperparams(lr=1.6e-3, lr_init=1.25e-5, lr_warmup_epochs=5, decay_epochs=decay,
                           beta1=0.9, beta2=0.9, l2=1e-5)
    if optimizer == "vogn":
        return Hyperparams(lr=1.6e-3, lr_init=1.25e-5, lr_warmup_epochs=5, decay_epochs=decay,
                           beta1=0.9, beta2=0.999, prior_prec=133.3, damping=1e-4, mc_samples=1,
                           rho=IMAGENET_RHO)
    if optimizer == "noisy-kfac":
        return Hyperparams(lr=1.6e-3, lr_init=1.25e-5, lr_warmup_epochs=5, decay_epochs=decay,
                           beta1=0.9, beta2=0.9, prior_prec=133.3, damping=1e-4, mc_samples=1,
                           rho=IMAGENET_RHO)
    raise ValueError(optimizer)


def permuted_digits_vogn():
    """Desk-scale continual-learning settings (standard-normal prior, no momentum)."""
    return Hyperparams(lr=0.05, beta1=0.0, beta2=0.1, prior_prec=1.0, mc_samples=1)
