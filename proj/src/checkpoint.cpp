#include "memts/checkpoint.hpp"

#include <map>
#include <sstream>

#include "memts/error.hpp"
#include "memts/io.hpp"

namespace memts {

namespace fs = std::filesystem;

namespace {

constexpr std::string_view kManifestTag = "memts-checkpoint";

std::string shape_text(const Shape& shape) {
    std::string out;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += 'x';
        out += std::to_string(shape[i]);
    }
    return out;
}

Shape parse_shape(const std::string& text) {
    Shape shape;
    std::istringstream is(text);
    std::string part;
    while (std::getline(is, part, 'x')) {
        std::size_t pos = 0;
        std::size_t v = 0;
        try {
            v = std::stoull(part, &pos);
        } catch (const std::exception&) {
            pos = std::string::npos;
        }
        if (pos != part.size()) throw PersistenceError("manifest: bad shape '" + text + "'");
        shape.push_back(v);
    }
    if (shape.empty()) throw PersistenceError("manifest: empty shape");
    return shape;
}

struct ArrayEntry {
    Shape shape;
    std::uint64_t offset = 0;
    std::uint64_t count = 0;
};

struct Blob {
    ByteWriter bytes;
    std::ostringstream manifest;

    void add(const std::string& name, const Shape& shape, std::span<const double> values) {
        manifest << "array " << name << " f64 " << shape_text(shape) << ' ' << bytes.str().size() << ' '
                 << values.size() << '\n';
        bytes.f64s(values);
    }
};

std::string normalizer_csv(const Checkpoint& c) {
    std::ostringstream os;
    os << "feature,mean,std\n";
    for (std::size_t j = 0; j < c.feature_names.size(); ++j)
        os << c.feature_names[j] << ',' << format_double(c.normalizer.means[j]) << ','
           << format_double(c.normalizer.stds[j]) << '\n';
    os << "# target," << c.feature_names.at(c.target_index) << '\n';
    return os.str();
}

void parse_normalizer(const std::string& text, Checkpoint& c) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "feature,mean,std") throw PersistenceError("normalizer.csv: bad header");
    std::string target;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (line.rfind("# target,", 0) == 0) {
            target = line.substr(9);
            continue;
        }
        const auto a = line.find(',');
        const auto b = line.find(',', a == std::string::npos ? a : a + 1);
        if (a == std::string::npos || b == std::string::npos) throw PersistenceError("normalizer.csv: bad row");
        c.feature_names.push_back(line.substr(0, a));
        try {
            c.normalizer.means.push_back(parse_double(line.substr(a + 1, b - a - 1)));
            c.normalizer.stds.push_back(parse_double(line.substr(b + 1)));
        } catch (const Error& e) {
            throw PersistenceError(std::string("normalizer.csv: ") + e.what());
        }
    }
    const auto it = std::find(c.feature_names.begin(), c.feature_names.end(), target);
    if (it == c.feature_names.end()) throw PersistenceError("normalizer.csv: target '" + target + "' not listed");
    c.target_index = static_cast<std::size_t>(it - c.feature_names.begin());
}

}  // namespace

void save_checkpoint(const fs::path& dir, const Checkpoint& c) {
    if (c.normalizer.means.size() != c.feature_names.size() || c.normalizer.stds.size() != c.feature_names.size())
        throw PersistenceError("checkpoint: normalizer does not cover every feature");
    const NamedTensors params = c.model.parameters();
    Blob blob;
    blob.manifest << kManifestTag << ' ' << kCheckpointFormatVersion << '\n'
                  << "byte_order little\n"
                  << "steps " << c.steps << '\n'
                  << "optimizer " << (c.optimizer ? c.optimizer->steps : 0) << ' ' << (c.optimizer ? "yes" : "no")
                  << '\n';
    for (const auto& [name, p] : params) blob.add(name, p.shape(), p.data());
    if (c.optimizer) {
        if (c.optimizer->first.size() != params.size() || c.optimizer->second.size() != params.size())
            throw PersistenceError("checkpoint: optimizer state does not match the parameters");
        for (std::size_t i = 0; i < params.size(); ++i) {
            blob.add("adam.m." + params[i].first, params[i].second.shape(), c.optimizer->first[i]);
            blob.add("adam.v." + params[i].first, params[i].second.shape(), c.optimizer->second[i]);
        }
    }

    fs::path tmp = dir;
    tmp += ".partial";
    fs::remove_all(tmp);
    try {
        fs::create_directories(tmp);
        write_file_atomic(tmp / "arrays.bin", blob.bytes.str());
        write_file_atomic(tmp / "config.txt", format_run_config(c.config));
        write_file_atomic(tmp / "memory.bin", persist(c.memory));
        write_file_atomic(tmp / "normalizer.csv", normalizer_csv(c));
        write_file_atomic(tmp / "manifest.txt", blob.manifest.str());
        fs::remove_all(dir);
        fs::rename(tmp, dir);
    } catch (const fs::filesystem_error& e) {
        fs::remove_all(tmp);
        throw PersistenceError(std::string("checkpoint: ") + e.what());
    } catch (...) {
        fs::remove_all(tmp);
        throw;
    }
}

Checkpoint load_checkpoint(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw PersistenceError("checkpoint " + dir.string() + " is not a directory");
    std::istringstream manifest(read_file(dir / "manifest.txt"));
    std::string tag;
    std::uint32_t version = 0;
    if (!(manifest >> tag >> version) || tag != kManifestTag) throw PersistenceError("manifest: not a checkpoint");
    if (version != kCheckpointFormatVersion)
        throw PersistenceError("checkpoint version " + std::to_string(version) + ", expected " +
                               std::to_string(kCheckpointFormatVersion));

    Checkpoint c;
    bool has_optimizer = false;
    std::size_t optimizer_steps = 0;
    std::map<std::string, ArrayEntry> arrays;
    std::string word;
    while (manifest >> word) {
        if (word == "byte_order") {
            std::string order;
            manifest >> order;
            if (order != "little") throw PersistenceError("manifest: unsupported byte order '" + order + "'");
        } else if (word == "steps") {
            manifest >> c.steps;
        } else if (word == "optimizer") {
            std::string flag;
            manifest >> optimizer_steps >> flag;
            has_optimizer = flag == "yes";
        } else if (word == "array") {
            std::string name, dtype, shape;
            ArrayEntry e;
            manifest >> name >> dtype >> shape >> e.offset >> e.count;
            if (dtype != "f64") throw PersistenceError("manifest: array " + name + " has dtype " + dtype);
            e.shape = parse_shape(shape);
            if (element_count(e.shape) != e.count) throw PersistenceError("manifest: array " + name + " count mismatch");
            if (!arrays.emplace(name, e).second) throw PersistenceError("manifest: duplicate array " + name);
        } else {
            throw PersistenceError("manifest: unexpected entry '" + word + "'");
        }
        if (!manifest) throw PersistenceError("manifest: truncated entry after '" + word + "'");
    }

    try {
        c.config = parse_run_config(read_file(dir / "config.txt"), (dir / "config.txt").string());
        c.config.model.validate();
    } catch (const ConfigError& e) {
        throw PersistenceError(std::string("checkpoint config: ") + e.what());
    }
    c.model = Model(c.config.model, c.config.seed);

    const std::string bytes = read_file(dir / "arrays.bin");
    auto read_array = [&](const std::string& name, const Shape& shape, std::span<double> out) {
        const auto it = arrays.find(name);
        if (it == arrays.end()) throw PersistenceError("checkpoint: missing array " + name);
        if (it->second.shape != shape)
            throw PersistenceError("checkpoint: array " + name + " has shape " + shape_text(it->second.shape) +
                                   ", model expects " + shape_text(shape));
        const std::uint64_t size = it->second.count * 8;
        if (it->second.offset > bytes.size() || size > bytes.size() - it->second.offset)
            throw PersistenceError("checkpoint: array " + name + " runs past arrays.bin");
        ByteReader r(std::string_view(bytes).substr(it->second.offset, size));
        r.f64s(out);
        arrays.erase(it);
    };

    NamedTensors params = c.model.parameters();
    for (auto& [name, p] : params) read_array(name, p.shape(), p.data());
    if (has_optimizer) {
        OptimizerState s;
        s.steps = optimizer_steps;
        for (const auto& [name, p] : params) {
            s.first.emplace_back(p.size());
            s.second.emplace_back(p.size());
            read_array("adam.m." + name, p.shape(), s.first.back());
            read_array("adam.v." + name, p.shape(), s.second.back());
        }
        c.optimizer = std::move(s);
    }
    if (!arrays.empty()) throw PersistenceError("checkpoint: unexpected array " + arrays.begin()->first);

    c.memory = restore(read_file(dir / "memory.bin"), c.config.model.mem_slots, c.config.model.d_rm());
    parse_normalizer(read_file(dir / "normalizer.csv"), c);
    if (c.feature_names.size() != c.config.model.features)
        throw PersistenceError("checkpoint: normalizer lists " + std::to_string(c.feature_names.size()) +
                               " features, model expects " + std::to_string(c.config.model.features));
    return c;
}

}  // namespace memts
