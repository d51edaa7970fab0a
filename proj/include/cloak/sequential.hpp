#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "cloak/layers.hpp"

namespace cloak {

/// Ordered list of layers, itself usable as a layer so that blocks with
/// internal structure (residual, inception) can nest.
template <typename T>
class Sequential : public Layer<T> {
 public:
  explicit Sequential(std::string name = "net") : Layer<T>(std::move(name)) {}

  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  template <typename L, typename... Args>
  L* emplace(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L* raw = layer.get();
    layers_.push_back(std::move(layer));
    return raw;
  }

  void add(std::unique_ptr<Layer<T>> layer) { layers_.push_back(std::move(layer)); }

  std::size_t size() const { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_[i]; }
  const Layer<T>& layer(std::size_t i) const { return *layers_[i]; }

  TensorT<T> forward(const TensorT<T>& x) override {
    TensorT<T> cur = x;
    for (auto& l : layers_) cur = l->forward(cur);
    return cur;
  }

  TensorT<T> infer(const TensorT<T>& x) const override {
    TensorT<T> cur = x;
    for (const auto& l : layers_) cur = l->infer(cur);
    return cur;
  }

  TensorT<T> backward(const TensorT<T>& dy, bool accumulate) override {
    TensorT<T> cur = dy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
      cur = (*it)->backward(cur, accumulate);
    return cur;
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    const std::string p = nested_prefix(prefix);
    for (auto& l : layers_) l->collect_params(p, out);
  }

  void collect_state(const std::string& prefix, std::vector<StateRef<T>>& out) override {
    const std::string p = nested_prefix(prefix);
    for (auto& l : layers_) l->collect_state(p, out);
  }

  void set_training(bool training) override {
    this->training_ = training;
    for (auto& l : layers_) l->set_training(training);
  }

  void init(Rng& rng) override {
    for (auto& l : layers_) l->init(rng);
  }

  Shape3 out_shape(const Shape3& in) const override {
    Shape3 s = in;
    for (const auto& l : layers_) s = l->out_shape(s);
    return s;
  }

  std::int64_t param_count() const override {
    std::int64_t total = 0;
    for (const auto& l : layers_) total += l->param_count();
    return total;
  }

  std::int64_t macs(const Shape3& in) const override {
    Shape3 s = in;
    std::int64_t total = 0;
    for (const auto& l : layers_) {
      total += l->macs(s);
      s = l->out_shape(s);
    }
    return total;
  }

  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> out;
    collect_params("", out);
    return out;
  }

  std::vector<StateRef<T>> state() {
    std::vector<StateRef<T>> out;
    collect_state("", out);
    return out;
  }

  void set_top_level(bool v) { top_level_ = v; }

 private:
  // Top-level networks keep bare parameter names; nested blocks prefix theirs.
  std::string nested_prefix(const std::string& prefix) const {
    if (prefix.empty() && top_level_) return "";
    return prefix + this->name_ + ".";
  }

  std::vector<std::unique_ptr<Layer<T>>> layers_;
  bool top_level_ = true;
};

/// Main branch plus shortcut, summed, then activated. The shortcut is empty
/// for an identity skip.
template <typename T>
class ResidualBlock : public Layer<T> {
 public:
  ResidualBlock(std::string name, Sequential<T> main, Sequential<T> shortcut, double slope)
      : Layer<T>(std::move(name)),
        main_(std::move(main)),
        shortcut_(std::move(shortcut)),
        slope_(slope) {
    main_.set_top_level(false);
    shortcut_.set_top_level(false);
  }

  TensorT<T> forward(const TensorT<T>& x) override {
    TensorT<T> ym = main_.forward(x);
    TensorT<T> ys = shortcut_.size() ? shortcut_.forward(x) : x;
    for (std::int64_t i = 0; i < ym.numel(); ++i) ym[i] += ys[i];
    act_out_ = apply_act(ym);
    return act_out_;
  }

  TensorT<T> infer(const TensorT<T>& x) const override {
    TensorT<T> ym = main_.infer(x);
    TensorT<T> ys = shortcut_.size() ? shortcut_.infer(x) : x;
    for (std::int64_t i = 0; i < ym.numel(); ++i) ym[i] += ys[i];
    return apply_act(ym);
  }

  TensorT<T> backward(const TensorT<T>& dy, bool accumulate) override {
    TensorT<T> dsum = dy;
    const T s = static_cast<T>(slope_);
    for (std::int64_t i = 0; i < dsum.numel(); ++i)
      if (act_out_[i] <= T(0)) dsum[i] *= s;
    TensorT<T> dx = main_.backward(dsum, accumulate);
    TensorT<T> dxs = shortcut_.size() ? shortcut_.backward(dsum, accumulate) : dsum;
    for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += dxs[i];
    return dx;
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    const std::string p = prefix + this->name_ + ".";
    main_.collect_params(p, out);
    shortcut_.collect_params(p, out);
  }

  void collect_state(const std::string& prefix, std::vector<StateRef<T>>& out) override {
    const std::string p = prefix + this->name_ + ".";
    main_.collect_state(p, out);
    shortcut_.collect_state(p, out);
  }

  void set_training(bool training) override {
    this->training_ = training;
    main_.set_training(training);
    shortcut_.set_training(training);
  }

  void init(Rng& rng) override {
    main_.init(rng);
    shortcut_.init(rng);
  }

  Shape3 out_shape(const Shape3& in) const override { return main_.out_shape(in); }

  std::int64_t param_count() const override {
    return main_.param_count() + shortcut_.param_count();
  }

  std::int64_t macs(const Shape3& in) const override {
    return main_.macs(in) + (shortcut_.size() ? shortcut_.macs(in) : 0);
  }

 private:
  TensorT<T> apply_act(const TensorT<T>& x) const {
    TensorT<T> y = x;
    const T s = static_cast<T>(slope_);
    for (std::int64_t i = 0; i < y.numel(); ++i)
      if (y[i] < T(0)) y[i] *= s;
    return y;
  }

  Sequential<T> main_, shortcut_;
  double slope_;
  TensorT<T> act_out_;
};

/// Parallel branches concatenated along the channel dimension.
template <typename T>
class InceptionBlock : public Layer<T> {
 public:
  InceptionBlock(std::string name, std::vector<Sequential<T>> branches)
      : Layer<T>(std::move(name)), branches_(std::move(branches)) {
    for (auto& b : branches_) b.set_top_level(false);
  }

  TensorT<T> forward(const TensorT<T>& x) override {
    std::vector<TensorT<T>> outs;
    outs.reserve(branches_.size());
    for (auto& b : branches_) outs.push_back(b.forward(x));
    branch_channels_.clear();
    for (const auto& o : outs) branch_channels_.push_back(o.c());
    return concat(outs);
  }

  TensorT<T> infer(const TensorT<T>& x) const override {
    std::vector<TensorT<T>> outs;
    outs.reserve(branches_.size());
    for (const auto& b : branches_) outs.push_back(b.infer(x));
    return concat(outs);
  }

  TensorT<T> backward(const TensorT<T>& dy, bool accumulate) override {
    TensorT<T> dx;
    int c0 = 0;
    for (std::size_t bi = 0; bi < branches_.size(); ++bi) {
      const int bc = branch_channels_[bi];
      TensorT<T> slice(dy.n(), bc, dy.h(), dy.w());
      for (int n = 0; n < dy.n(); ++n)
        for (int c = 0; c < bc; ++c)
          std::copy(&dy.at(n, c0 + c, 0, 0), &dy.at(n, c0 + c, 0, 0) + dy.h() * dy.w(),
                    &slice.at(n, c, 0, 0));
      TensorT<T> dxi = branches_[bi].backward(slice, accumulate);
      if (dx.empty())
        dx = dxi;
      else
        for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += dxi[i];
      c0 += bc;
    }
    return dx;
  }

  void collect_params(const std::string& prefix, std::vector<ParamRef<T>>& out) override {
    const std::string p = prefix + this->name_ + ".";
    for (auto& b : branches_) b.collect_params(p, out);
  }

  void collect_state(const std::string& prefix, std::vector<StateRef<T>>& out) override {
    const std::string p = prefix + this->name_ + ".";
    for (auto& b : branches_) b.collect_state(p, out);
  }

  void set_training(bool training) override {
    this->training_ = training;
    for (auto& b : branches_) b.set_training(training);
  }

  void init(Rng& rng) override {
    for (auto& b : branches_) b.init(rng);
  }

  Shape3 out_shape(const Shape3& in) const override {
    Shape3 out{0, 0, 0};
    for (const auto& b : branches_) {
      Shape3 s = b.out_shape(in);
      out.c += s.c;
      out.h = s.h;
      out.w = s.w;
    }
    return out;
  }

  std::int64_t param_count() const override {
    std::int64_t total = 0;
    for (const auto& b : branches_) total += b.param_count();
    return total;
  }

  std::int64_t macs(const Shape3& in) const override {
    std::int64_t total = 0;
    for (const auto& b : branches_) total += b.macs(in);
    return total;
  }

 private:
  static TensorT<T> concat(const std::vector<TensorT<T>>& parts) {
    int total_c = 0;
    for (const auto& p : parts) total_c += p.c();
    const TensorT<T>& f = parts.front();
    TensorT<T> y(f.n(), total_c, f.h(), f.w());
    int c0 = 0;
    for (const auto& p : parts) {
      for (int n = 0; n < p.n(); ++n)
        for (int c = 0; c < p.c(); ++c)
          std::copy(&p.at(n, c, 0, 0), &p.at(n, c, 0, 0) + p.h() * p.w(),
                    &y.at(n, c0 + c, 0, 0));
      c0 += p.c();
    }
    return y;
  }

  std::vector<Sequential<T>> branches_;
  std::vector<int> branch_channels_;
};

}  // namespace cloak
