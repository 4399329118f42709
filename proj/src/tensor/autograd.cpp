/* Copyright (c) 2026 The otfnet Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

#include "otf/autograd.hpp"

#include "otf/error.hpp"

namespace otf {

void Parameter::zero_grad() {
  if (!trainable) return;
  if (grad.shape() != value.shape()) {
    grad = Tensor(value.shape());
  } else {
    grad.fill(0.0f);
  }
}

const Tensor& Var::value() const { return tape_->value(*this); }

bool Var::requires_grad() const { return tape_->requires_grad(*this); }

Var Tape::push(Record r) {
  records_.push_back(std::move(r));
  return Var(this, static_cast<int>(records_.size()) - 1);
}

Tape::Record& Tape::at(Var v) {
  if (v.tape_ != this || v.id_ < 0 || v.id_ >= static_cast<int>(records_.size())) {
    throw Error("variable does not belong to this tape");
  }
  return records_[static_cast<std::size_t>(v.id_)];
}

const Tape::Record& Tape::at(Var v) const {
  if (v.tape_ != this || v.id_ < 0 || v.id_ >= static_cast<int>(records_.size())) {
    throw Error("variable does not belong to this tape");
  }
  return records_[static_cast<std::size_t>(v.id_)];
}

Var Tape::constant(Tensor value) {
  Record r;
  r.owned = std::move(value);
  return push(std::move(r));
}

Var Tape::constant_ref(const Tensor& value) {
  Record r;
  r.alias = &value;
  return push(std::move(r));
}

Var Tape::leaf(Tensor value) {
  Record r;
  r.owned = std::move(value);
  r.requires_grad = true;
  return push(std::move(r));
}

Var Tape::parameter(Parameter& p) {
  Record r;
  r.alias = &p.value;
  r.requires_grad = p.trainable;
  r.param = p.trainable ? &p : nullptr;
  return push(std::move(r));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
  Record r;
  r.owned = std::move(value);
  for (const Var& in : inputs) {
    if (at(in).requires_grad) {
      r.requires_grad = true;
      break;
    }
  }
  if (r.requires_grad) r.backward = std::move(backward);
  return push(std::move(r));
}

const Tensor& Tape::value(Var v) const { return at(v).value(); }

bool Tape::requires_grad(Var v) const { return at(v).requires_grad; }

Tensor& Tape::grad(Var v) {
  Record& r = at(v);
  if (r.grad.shape() != r.value().shape()) r.grad = Tensor(r.value().shape());
  return r.grad;
}

bool Tape::has_grad(Var v) const {
  const Record& r = at(v);
  return !r.grad.empty() && r.grad.shape() == r.value().shape();
}

void Tape::backward(Var loss) {
  const Record& root = at(loss);
  if (root.value().size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + root.value().shape().str());
  }
  if (!root.requires_grad) return;
  grad(loss)[0] = 1.0f;

  for (int id = loss.id_; id >= 0; --id) {
    Record& r = records_[static_cast<std::size_t>(id)];
    if (!r.requires_grad || r.grad.empty()) continue;
    if (r.backward) {
      // The rule may grow grads of earlier records but never touches this one again.
      const Tensor out_grad = std::move(r.grad);
      r.backward(*this, out_grad);
      r.grad = Tensor();
    } else if (r.param != nullptr) {
      Parameter& p = *r.param;
      if (p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape());
      auto dst = p.grad.data();
      auto src = r.grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
}

}  // namespace otf
