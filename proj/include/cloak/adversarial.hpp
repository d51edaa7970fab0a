#pragma once

#include <span>

#include "cloak/losses.hpp"
#include "cloak/sequential.hpp"

namespace cloak {

struct AdversarialLosses {
  double L_c = 0.0;
  double L_r = 0.0;
};

/// One shared forward pass through the three-network graph
///
///   x -> obfuscator -> (classifier -> L_c ; reconstructor -> L_r vs x)
///
/// followed by both players' backward passes, all against the same
/// pre-update parameter state. Parameter gradients land in the layers'
/// grad buffers: the reconstructor receives dL_r/dtheta (it minimizes
/// reconstruction error with the obfuscated batch taken as given), the
/// obfuscator receives d(L_c - lambda * L_r)/dtheta (classification kept,
/// reconstruction defeated), and the classifier receives nothing - only
/// gradients *through* it are used.
template <typename T>
AdversarialLosses adversarial_grads(Sequential<T>& obf, Sequential<T>& deobf,
                                    Sequential<T>& clf, const TensorT<T>& x,
                                    std::span<const int> labels, double lambda) {
  TensorT<T> obfuscated = obf.forward(x);
  TensorT<T> logits = clf.forward(obfuscated);
  TensorT<T> reconstructed = deobf.forward(obfuscated);

  auto [lc, dlogits] = classification_loss_with_grad(logits, labels);
  const double lr_value = reconstruction_loss(x, reconstructed);
  TensorT<T> drec = reconstruction_loss_grad(x, reconstructed);

  TensorT<T> g_class = clf.backward(dlogits, /*accumulate_param_grads=*/false);
  TensorT<T> g_recon = deobf.backward(drec, /*accumulate_param_grads=*/true);

  TensorT<T> g_obf_out = std::move(g_class);
  const T lam = static_cast<T>(lambda);
  for (std::int64_t i = 0; i < g_obf_out.numel(); ++i) g_obf_out[i] -= lam * g_recon[i];
  obf.backward(g_obf_out, /*accumulate_param_grads=*/true);

  return {lc, lr_value};
}

}  // namespace cloak
