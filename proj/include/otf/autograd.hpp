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

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "otf/tensor.hpp"

namespace otf {

/// A named model tensor. Trainable parameters carry a gradient buffer of the same shape;
/// non-trainable ones (BN running statistics) are state that travels with checkpoints.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  void zero_grad();
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Linear record of differentiable operations for reverse-mode differentiation.
///
/// Records are appended in execution order, so every record's inputs precede it and a
/// reverse sweep is a valid topological traversal. A record only keeps a backward rule
/// when at least one of its inputs requires a gradient; graphs built purely from
/// constants (frozen teachers, evaluation) cost no backward bookkeeping.
class Tape {
 public:
  /// Receives the gradient flowing into the record's output.
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Records a constant that aliases `value`; the referent must outlive the tape.
  Var constant_ref(const Tensor& value);
  /// Differentiable leaf owned by the tape; read its gradient with grad() after backward().
  Var leaf(Tensor value);
  /// Differentiable leaf aliasing `p.value`; backward() adds into `p.grad`.
  Var parameter(Parameter& p);

  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  /// Gradient buffer of `v`, zero-initialised on first access.
  Tensor& grad(Var v);
  bool has_grad(Var v) const;

  /// Reverse sweep from a single-element loss. Each record is visited at most once.
  void backward(Var loss);

  std::size_t size() const { return records_.size(); }

 private:
  struct Record {
    Tensor owned;
    const Tensor* alias = nullptr;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;

    const Tensor& value() const { return alias ? *alias : owned; }
  };

  Var push(Record r);
  Record& at(Var v);
  const Record& at(Var v) const;

  std::vector<Record> records_;
};

}  // namespace otf
