#include "msformer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace msformer {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blob is little-endian; byte swapping is not implemented");

namespace fs = std::filesystem;

void save_checkpoint(const std::string& dir, const std::vector<Parameter>& params) {
    fs::create_directories(dir);
    const fs::path manifest_path = fs::path(dir) / "manifest.txt";
    const fs::path blob_path = fs::path(dir) / "weights.bin";

    std::ofstream manifest(manifest_path);
    if (!manifest) throw IoError("save_checkpoint: cannot write " + manifest_path.string());
    std::ofstream blob(blob_path, std::ios::binary);
    if (!blob) throw IoError("save_checkpoint: cannot write " + blob_path.string());

    manifest << "msformer-checkpoint 1 float64\n";
    std::size_t offset = 0;
    for (const auto& p : params) {
        manifest << "param " << p.name << ' ' << offset;
        for (std::size_t d : p.value.shape()) manifest << ' ' << d;
        manifest << '\n';
        blob.write(reinterpret_cast<const char*>(p.value.data()),
                   static_cast<std::streamsize>(p.value.size() * sizeof(double)));
        offset += p.value.size();
    }
    manifest << "end " << offset << '\n';
    if (!manifest || !blob) throw IoError("save_checkpoint: write failure under " + dir);
}

void load_checkpoint(const std::string& dir, std::vector<Parameter>& params) {
    const fs::path manifest_path = fs::path(dir) / "manifest.txt";
    const fs::path blob_path = fs::path(dir) / "weights.bin";
    std::ifstream manifest(manifest_path);
    if (!manifest) throw IoError("load_checkpoint: cannot open " + manifest_path.string());
    std::ifstream blob(blob_path, std::ios::binary);
    if (!blob) throw IoError("load_checkpoint: cannot open " + blob_path.string());

    std::string header;
    std::getline(manifest, header);
    if (header.rfind("msformer-checkpoint 1", 0) != 0) {
        throw CheckpointError("load_checkpoint: unrecognized manifest header '" + header + "'");
    }

    std::size_t entry = 0;
    std::string line;
    while (std::getline(manifest, line)) {
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "end") break;
        if (tag != "param") {
            throw CheckpointError("load_checkpoint: malformed manifest line '" + line + "'");
        }
        std::string name;
        std::size_t offset = 0;
        ls >> name >> offset;
        std::vector<std::size_t> shape;
        std::size_t d;
        while (ls >> d) shape.push_back(d);
        if (entry >= params.size()) {
            throw CheckpointError("load_checkpoint: checkpoint has more parameters than the "
                                  "model (first extra: '" + name + "')");
        }
        Parameter& p = params[entry];
        if (p.name != name) {
            throw CheckpointError("load_checkpoint: parameter " + std::to_string(entry) +
                                  " is '" + p.name + "' in the model but '" + name +
                                  "' in the checkpoint");
        }
        if (p.value.shape() != shape) {
            throw CheckpointError("load_checkpoint: shape of '" + name + "' is " +
                                  shape_str(p.value.shape()) + " in the model but " +
                                  shape_str(shape) + " in the checkpoint");
        }
        blob.seekg(static_cast<std::streamoff>(offset * sizeof(double)));
        blob.read(reinterpret_cast<char*>(p.value.data()),
                  static_cast<std::streamsize>(p.value.size() * sizeof(double)));
        if (!blob) {
            throw CheckpointError("load_checkpoint: weight blob truncated while reading '" +
                                  name + "'");
        }
        ++entry;
    }
    if (entry != params.size()) {
        throw CheckpointError("load_checkpoint: model has " + std::to_string(params.size()) +
                              " parameters, checkpoint has " + std::to_string(entry));
    }
}

}  // namespace msformer
