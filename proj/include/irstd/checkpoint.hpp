#pragma once

// Single-file archive of named arrays plus named text entries. Values are
// stored as raw little-endian doubles so a round trip is bitwise exact.

#include <map>
#include <string>
#include <vector>

#include "irstd/nn.hpp"

namespace irstd {

class Checkpoint {
 public:
  void put(const std::string& name, const Tensor& t);
  void put_text(const std::string& name, std::string text);

  bool has(const std::string& name) const { return tensors_.count(name) > 0; }
  bool has_text(const std::string& name) const { return texts_.count(name) > 0; }
  const Tensor& get(const std::string& name) const;
  const std::string& text(const std::string& name) const;
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

 private:
  std::map<std::string, Tensor> tensors_;
  std::map<std::string, std::string> texts_;
};

// Adds every parameter of `m` under prefix + its dotted name.
void store_parameters(Checkpoint& ck, const nn::Module& m, const std::string& prefix = "");

// Copies archived values into parameters whose name matches one of the
// prefixes (empty list = all). Missing entries or shape mismatches throw.
// Returns the number of tensors loaded.
int load_parameters(const Checkpoint& ck, nn::Module& m, const std::vector<std::string>& prefixes = {});

}  // namespace irstd
