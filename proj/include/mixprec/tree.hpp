#pragma once

#include <cstddef>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "mixprec/tensor.hpp"

namespace mixprec {

class TreeError : public std::runtime_error {
public:
  TreeError(std::string path, const std::string& what)
      : std::runtime_error(path.empty() ? what : "at '" + path + "': " + what),
        path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

private:
  std::string path_;
};

/// Non-numeric payload (configuration strings, tags, ...). Never transformed.
struct Opaque {
  std::string value;
  friend bool operator==(const Opaque&, const Opaque&) = default;
};

/// Marks a slot that has no value, e.g. the gradient of a non-float leaf.
struct None {
  friend bool operator==(None, None) = default;
};

using Leaf = std::variant<None, Tensor, Scalar, Opaque>;

/// Recursive parameter container: a leaf, an insertion-ordered string-keyed
/// mapping, or a sequence.
class Tree {
public:
  using Entry = std::pair<std::string, Tree>;

  Tree() : node_(Leaf{None{}}) {}
  Tree(Leaf leaf) : node_(std::move(leaf)) {}
  Tree(Tensor t) : node_(Leaf{std::move(t)}) {}
  Tree(Scalar s) : node_(Leaf{s}) {}
  Tree(Opaque o) : node_(Leaf{std::move(o)}) {}

  static Tree mapping(std::vector<Entry> entries = {}) {
    Tree t;
    t.node_ = std::vector<Entry>{};
    for (auto& [key, child] : entries) t.set(std::move(key), std::move(child));
    return t;
  }
  static Tree sequence(std::vector<Tree> items = {}) {
    Tree t;
    t.node_ = std::move(items);
    return t;
  }

  bool is_leaf() const noexcept { return std::holds_alternative<Leaf>(node_); }
  bool is_mapping() const noexcept { return std::holds_alternative<std::vector<Entry>>(node_); }
  bool is_sequence() const noexcept { return std::holds_alternative<std::vector<Tree>>(node_); }

  const Leaf& leaf() const {
    if (!is_leaf()) throw TreeError("", "not a leaf");
    return std::get<Leaf>(node_);
  }
  const std::vector<Entry>& entries() const {
    if (!is_mapping()) throw TreeError("", "not a mapping");
    return std::get<std::vector<Entry>>(node_);
  }
  const std::vector<Tree>& items() const {
    if (!is_sequence()) throw TreeError("", "not a sequence");
    return std::get<std::vector<Tree>>(node_);
  }

  /// Convenience accessor for a tensor leaf.
  const Tensor& tensor() const {
    const auto* t = std::get_if<Tensor>(&leaf());
    if (t == nullptr) throw TreeError("", "leaf is not a tensor");
    return *t;
  }

  const Tree& at(std::string_view key) const {
    for (const auto& [k, child] : entries()) {
      if (k == key) return child;
    }
    throw TreeError(std::string(key), "no such key");
  }
  const Tree& at(std::size_t index) const {
    const auto& xs = items();
    if (index >= xs.size()) throw TreeError(std::to_string(index), "index out of range");
    return xs[index];
  }

  /// Inserts or replaces a mapping entry. Replacing keeps the original position.
  Tree& set(std::string key, Tree child) {
    auto& xs = std::get<std::vector<Entry>>(node_);
    for (auto& [k, existing] : xs) {
      if (k == key) {
        existing = std::move(child);
        return *this;
      }
    }
    xs.emplace_back(std::move(key), std::move(child));
    return *this;
  }

  Tree& push_back(Tree child) {
    std::get<std::vector<Tree>>(node_).push_back(std::move(child));
    return *this;
  }

private:
  std::variant<Leaf, std::vector<Entry>, std::vector<Tree>> node_;
};

namespace detail {

inline std::string join_path(const std::string& prefix, std::string_view part) {
  return prefix.empty() ? std::string(part) : prefix + "." + std::string(part);
}

template <class F>
Tree map_with_path(F& f, const Tree& t, const std::string& path) {
  if (t.is_leaf()) {
    try {
      return Tree(Leaf(f(t.leaf())));
    } catch (const TreeError&) {
      throw;
    } catch (const std::exception& e) {
      throw TreeError(path, e.what());
    }
  }
  if (t.is_mapping()) {
    Tree out = Tree::mapping();
    for (const auto& [key, child] : t.entries()) {
      out.set(key, map_with_path(f, child, join_path(path, key)));
    }
    return out;
  }
  Tree out = Tree::sequence();
  std::size_t i = 0;
  for (const auto& child : t.items()) {
    out.push_back(map_with_path(f, child, join_path(path, std::to_string(i++))));
  }
  return out;
}

template <class F>
Tree zip_with_path(F& f, const Tree& a, const Tree& b, const std::string& path) {
  if (a.is_leaf() && b.is_leaf()) {
    try {
      return Tree(Leaf(f(a.leaf(), b.leaf())));
    } catch (const TreeError&) {
      throw;
    } catch (const std::exception& e) {
      throw TreeError(path, e.what());
    }
  }
  if (a.is_mapping() && b.is_mapping()) {
    const auto& xs = a.entries();
    const auto& ys = b.entries();
    Tree out = Tree::mapping();
    for (std::size_t i = 0; i < std::max(xs.size(), ys.size()); ++i) {
      if (i >= xs.size() || i >= ys.size()) {
        const auto& extra = i < xs.size() ? xs[i].first : ys[i].first;
        throw TreeError(join_path(path, extra), "structure mismatch: key present on one side only");
      }
      if (xs[i].first != ys[i].first) {
        throw TreeError(join_path(path, xs[i].first) + "/" + join_path(path, ys[i].first),
                        "structure mismatch: keys differ");
      }
      out.set(xs[i].first, zip_with_path(f, xs[i].second, ys[i].second, join_path(path, xs[i].first)));
    }
    return out;
  }
  if (a.is_sequence() && b.is_sequence()) {
    if (a.items().size() != b.items().size()) {
      throw TreeError(path, "structure mismatch: sequence lengths " +
                                std::to_string(a.items().size()) + " and " +
                                std::to_string(b.items().size()));
    }
    Tree out = Tree::sequence();
    for (std::size_t i = 0; i < a.items().size(); ++i) {
      out.push_back(zip_with_path(f, a.items()[i], b.items()[i], join_path(path, std::to_string(i))));
    }
    return out;
  }
  throw TreeError(path, "structure mismatch: node kinds differ");
}

template <class F>
void visit_with_path(F& f, const Tree& t, const std::string& path) {
  if (t.is_leaf()) {
    f(path, t.leaf());
  } else if (t.is_mapping()) {
    for (const auto& [key, child] : t.entries()) visit_with_path(f, child, join_path(path, key));
  } else {
    std::size_t i = 0;
    for (const auto& child : t.items()) visit_with_path(f, child, join_path(path, std::to_string(i++)));
  }
}

inline void structure_repr(const Tree& t, std::string& out) {
  if (t.is_leaf()) {
    out += '*';
  } else if (t.is_mapping()) {
    out += '{';
    bool first = true;
    for (const auto& [key, child] : t.entries()) {
      if (!first) out += ',';
      first = false;
      out += std::to_string(key.size()) + ':' + key + '=';
      structure_repr(child, out);
    }
    out += '}';
  } else {
    out += '[';
    bool first = true;
    for (const auto& child : t.items()) {
      if (!first) out += ',';
      first = false;
      structure_repr(child, out);
    }
    out += ']';
  }
}

}  // namespace detail

/// The skeleton of a tree with its leaves erased. Trees are zippable iff
/// their structures compare equal.
class TreeStructure {
public:
  explicit TreeStructure(const Tree& t) { detail::structure_repr(t, repr_); }
  const std::string& repr() const noexcept { return repr_; }
  friend bool operator==(const TreeStructure&, const TreeStructure&) = default;

private:
  std::string repr_;
};

inline TreeStructure structure(const Tree& t) { return TreeStructure(t); }

/// Applies `f` (Leaf -> Leaf) to every leaf in traversal order. Exceptions
/// thrown by `f` are re-raised as TreeError carrying the leaf's path.
template <class F>
Tree tree_map(F f, const Tree& t) {
  return detail::map_with_path(f, t, "");
}

/// Pairwise leaf application over two trees of equal structure.
template <class F>
Tree tree_zip_map(F f, const Tree& a, const Tree& b) {
  return detail::zip_with_path(f, a, b, "");
}

/// Calls f(path, leaf) for every leaf in traversal order.
template <class F>
void tree_visit(F f, const Tree& t) {
  detail::visit_with_path(f, t, "");
}

/// Applies f to tensor leaves only; every other leaf is kept as-is.
template <class F>
Tree map_tensors(F f, const Tree& t) {
  return tree_map(
      [&f](const Leaf& leaf) -> Leaf {
        if (const auto* x = std::get_if<Tensor>(&leaf)) return Leaf(f(*x));
        return leaf;
      },
      t);
}

/// Every float-dtype tensor leaf with its dot-joined path.
inline std::vector<std::pair<std::string, Tensor>> float_leaves(const Tree& t) {
  std::vector<std::pair<std::string, Tensor>> out;
  tree_visit(
      [&out](const std::string& path, const Leaf& leaf) {
        if (const auto* x = std::get_if<Tensor>(&leaf); x && is_float(x->dtype())) {
          out.emplace_back(path, *x);
        }
      },
      t);
  return out;
}

/// True iff no float tensor leaf (or strong float scalar) holds inf or NaN.
inline bool all_finite(const Tree& t) {
  bool finite = true;
  tree_visit(
      [&finite](const std::string&, const Leaf& leaf) {
        if (const auto* x = std::get_if<Tensor>(&leaf)) {
          finite = finite && all_finite(*x);
        } else if (const auto* s = std::get_if<Scalar>(&leaf); s && !s->weak && is_float(s->dtype)) {
          finite = finite && std::isfinite(s->value);
        }
      },
      t);
  return finite;
}

inline bool bitwise_equal(const Leaf& a, const Leaf& b) {
  if (a.index() != b.index()) return false;
  if (const auto* x = std::get_if<Tensor>(&a)) return bitwise_equal(*x, std::get<Tensor>(b));
  if (const auto* s = std::get_if<Scalar>(&a)) {
    const auto& r = std::get<Scalar>(b);
    return s->weak == r.weak && s->dtype == r.dtype &&
           std::memcmp(&s->value, &r.value, sizeof(double)) == 0;
  }
  if (const auto* o = std::get_if<Opaque>(&a)) return o->value == std::get<Opaque>(b).value;
  return true;  // both None
}

/// Equal structure and bit-identical leaves.
inline bool bitwise_equal(const Tree& a, const Tree& b) {
  if (structure(a) != structure(b)) return false;
  bool equal = true;
  tree_zip_map(
      [&equal](const Leaf& x, const Leaf& y) {
        equal = equal && bitwise_equal(x, y);
        return x;
      },
      a, b);
  return equal;
}

namespace detail {

inline std::string leaf_repr(const Leaf& leaf) {
  return std::visit(
      [](const auto& v) -> std::string {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, None>) {
          return "none";
        } else if constexpr (std::is_same_v<T, Tensor>) {
          return to_string(v);
        } else if constexpr (std::is_same_v<T, Scalar>) {
          std::ostringstream out;
          out.precision(17);
          out << (v.weak ? "weak" : std::string("strong ") + std::string(name(v.dtype))) << "("
              << v.value << ")";
          return out.str();
        } else {
          return "opaque(\"" + v.value + "\")";
        }
      },
      leaf);
}

inline void write_tree(const Tree& t, int depth, std::string& out) {
  const std::string pad(static_cast<std::size_t>(depth) * 2, ' ');
  if (t.is_leaf()) {
    out += leaf_repr(t.leaf());
    return;
  }
  const bool mapping = t.is_mapping();
  const bool empty = mapping ? t.entries().empty() : t.items().empty();
  out += mapping ? "{" : "[";
  if (empty) {
    out += mapping ? "}" : "]";
    return;
  }
  out += "\n";
  if (mapping) {
    for (const auto& [key, child] : t.entries()) {
      out += pad + "  " + key + ": ";
      write_tree(child, depth + 1, out);
      out += "\n";
    }
  } else {
    for (const auto& child : t.items()) {
      out += pad + "  ";
      write_tree(child, depth + 1, out);
      out += "\n";
    }
  }
  out += pad + (mapping ? "}" : "]");
}

}  // namespace detail

/// Canonical human-readable rendering, used by golden tests. Not a wire format.
inline std::string to_string(const Tree& t) {
  std::string out;
  detail::write_tree(t, 0, out);
  return out;
}

}  // namespace mixprec
