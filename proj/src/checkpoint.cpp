#include "verifierq/checkpoint.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "verifierq/error.hpp"

namespace verifierq {

using ordered_json = nlohmann::ordered_json;

std::string format_double(double x) {
  char buf[40];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x, std::chars_format::general, 17);
  if (ec != std::errc()) {
    throw Error("format_double failed");
  }
  return std::string(buf, ptr);
}

double parse_double(const std::string& text) {
  double x = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), x);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw FormatError("bad number '" + text + "'");
  }
  return x;
}

const Approximator& Checkpoint::head(const std::string& name) const {
  for (const auto& [n, h] : heads) {
    if (n == name) {
      return h;
    }
  }
  throw FormatError("checkpoint has no head '" + name + "'");
}

const ParamSet& Checkpoint::param(const std::string& name) const {
  for (const auto& [n, p] : params) {
    if (n == name) {
      return p;
    }
  }
  throw FormatError("checkpoint has no parameter set '" + name + "'");
}

bool Checkpoint::has_head(const std::string& name) const {
  for (const auto& h : heads) {
    if (h.first == name) {
      return true;
    }
  }
  return false;
}

bool Checkpoint::has_param(const std::string& name) const {
  for (const auto& p : params) {
    if (p.first == name) {
      return true;
    }
  }
  return false;
}

namespace {

ordered_json layout_json(const Layout& l) {
  ordered_json arr = ordered_json::array();
  for (const Slice& s : l.slices()) {
    arr.push_back(ordered_json{{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}});
  }
  return arr;
}

Layout layout_from_json(const ordered_json& arr) {
  Layout l;
  for (const auto& s : arr) {
    l.add(s.at("name").get<std::string>(), s.at("rows").get<std::size_t>(), s.at("cols").get<std::size_t>());
  }
  return l;
}

void write_values(std::ostream& out, const ParamSet& p) {
  out << p.values.size() << '\n';
  for (double x : p.values) {
    out << format_double(x) << '\n';
  }
}

struct LineReader {
  std::istream& in;
  std::size_t line = 0;

  std::string next(const char* what) {
    std::string s;
    if (!std::getline(in, s)) {
      throw FormatError(std::string("checkpoint truncated: expected ") + what);
    }
    ++line;
    return s;
  }
};

std::vector<double> read_values(LineReader& r, std::size_t expected) {
  const std::string count_line = r.next("value count");
  std::size_t count = 0;
  auto [ptr, ec] = std::from_chars(count_line.data(), count_line.data() + count_line.size(), count);
  if (ec != std::errc() || count != expected) {
    throw FormatError("checkpoint value count mismatch at line " + std::to_string(r.line));
  }
  std::vector<double> v(count);
  for (double& x : v) {
    x = parse_double(r.next("parameter value"));
  }
  return v;
}

}  // namespace

void write_checkpoint(const Checkpoint& ckpt, std::ostream& out) {
  out << kCheckpointMagic << " v" << kCheckpointVersion << '\n';
  out << "meta " << ckpt.meta.dump() << '\n';
  if (ckpt.index) {
    out << "index " << ckpt.index->vocab_size() << ' ' << ckpt.index->node_count() << '\n';
    for (const auto& n : ckpt.index->nodes()) {
      out << n.problem << ' ' << n.parent << ' ' << n.action << '\n';
    }
  }
  for (const auto& [name, h] : ckpt.heads) {
    ordered_json d;
    d["mode"] = h.mode() == HeadMode::tabular ? "tabular" : "mlp";
    d["takes_action"] = h.takes_action();
    if (h.mode() == HeadMode::mlp) {
      const FeatureSpec& f = h.features();
      d["features"] = ordered_json{
          {"horizon", f.horizon}, {"vocab", f.vocab_size}, {"embed_dim", f.embed_dim}, {"embed_seed", f.embed_seed}};
      d["shape"] = ordered_json{{"hidden1", h.shape().hidden1}, {"hidden2", h.shape().hidden2}};
    } else if (h.index() != ckpt.index && !(ckpt.index && h.index() && *h.index() == *ckpt.index)) {
      throw ContractError("tabular head '" + name + "' does not use the checkpoint's index");
    }
    d["layout"] = layout_json(h.params().layout);
    out << "head " << name << ' ' << d.dump() << '\n';
    write_values(out, h.params());
  }
  for (const auto& [name, p] : ckpt.params) {
    out << "params " << name << ' ' << layout_json(p.layout).dump() << '\n';
    write_values(out, p);
  }
  out << "end\n";
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("cannot open " + path.string() + " for writing");
  }
  write_checkpoint(ckpt, out);
  if (!out) {
    throw Error("write failed for " + path.string());
  }
}

Checkpoint read_checkpoint(std::istream& in) {
  LineReader r{in};
  const std::string header = r.next("header");
  const std::string expected = std::string(kCheckpointMagic) + " v" + std::to_string(kCheckpointVersion);
  if (header.rfind(kCheckpointMagic, 0) != 0) {
    throw FormatError("not a verifierq checkpoint");
  }
  if (header != expected) {
    throw FormatError("unsupported checkpoint version: '" + header + "'");
  }
  Checkpoint ckpt;
  try {
    const std::string meta = r.next("meta");
    if (meta.rfind("meta ", 0) != 0) {
      throw FormatError("checkpoint missing meta line");
    }
    ckpt.meta = ordered_json::parse(meta.substr(5));
    for (;;) {
      const std::string line = r.next("section or end");
      std::istringstream ls(line);
      std::string kind;
      ls >> kind;
      if (kind == "end") {
        break;
      }
      if (kind == "index") {
        int vocab = 0;
        std::size_t n = 0;
        ls >> vocab >> n;
        std::vector<TabularIndex::Node> nodes(n);
        for (auto& node : nodes) {
          std::istringstream ns(r.next("index node"));
          if (!(ns >> node.problem >> node.parent >> node.action)) {
            throw FormatError("bad index node at line " + std::to_string(r.line));
          }
        }
        ckpt.index = TabularIndex::from_nodes(vocab, nodes);
      } else if (kind == "head") {
        std::string name;
        ls >> name;
        std::string rest;
        std::getline(ls, rest);
        const auto d = ordered_json::parse(rest);
        const bool takes_action = d.at("takes_action").get<bool>();
        Approximator h;
        if (d.at("mode").get<std::string>() == "tabular") {
          if (!ckpt.index) {
            throw FormatError("tabular head before index");
          }
          h = Approximator::tabular(ckpt.index, takes_action);
        } else {
          const auto& f = d.at("features");
          FeatureSpec fs{f.at("horizon").get<int>(), f.at("vocab").get<int>(), f.at("embed_dim").get<int>(),
                         f.at("embed_seed").get<std::uint64_t>()};
          MlpShape shape{d.at("shape").at("hidden1").get<int>(), d.at("shape").at("hidden2").get<int>()};
          h = Approximator::mlp(fs, shape, takes_action, 0);
        }
        if (!(layout_from_json(d.at("layout")) == h.params().layout)) {
          throw FormatError("head '" + name + "' layout does not match its configuration");
        }
        h.params().values = read_values(r, h.params().values.size());
        ckpt.heads.emplace_back(name, std::move(h));
      } else if (kind == "params") {
        std::string name;
        ls >> name;
        std::string rest;
        std::getline(ls, rest);
        ParamSet p = ParamSet::zeros(layout_from_json(ordered_json::parse(rest)));
        p.values = read_values(r, p.values.size());
        ckpt.params.emplace_back(name, std::move(p));
      } else {
        throw FormatError("unknown checkpoint section '" + kind + "' at line " + std::to_string(r.line));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt checkpoint near line " + std::to_string(r.line) + ": " + e.what());
  } catch (const ParameterError& e) {
    throw FormatError(std::string("corrupt checkpoint: ") + e.what());
  }
  return ckpt;
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot open checkpoint " + path.string());
  }
  return read_checkpoint(in);
}

}  // namespace verifierq
