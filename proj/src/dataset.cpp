#include "protos/dataset.hpp"

#include <cstdio>
#include <fstream>

#include "protos/errors.hpp"

namespace protos {

using nlohmann::json;
namespace fs = std::filesystem;

json to_json(const DatasetSpec& s) {
    return json{{"num_classes", s.num_classes},
                {"type_counts", s.type_counts},
                {"train_per_class", s.train_per_class},
                {"test_per_class", s.test_per_class},
                {"seed", s.seed},
                {"scene",
                 {{"height", s.scene.height},
                  {"width", s.scene.width},
                  {"num_backgrounds", s.scene.num_backgrounds},
                  {"jitter", s.scene.jitter},
                  {"clutter", s.scene.clutter}}}};
}

DatasetSpec dataset_spec_from_json(const json& j, const DatasetSpec& d) {
    DatasetSpec s = d;
    s.num_classes = j.value("num_classes", d.num_classes);
    if (j.contains("type_counts")) {
        const auto counts = j.at("type_counts").get<std::vector<int>>();
        if (counts.size() != kCategoryCount) throw RejectedInput("type_counts needs one entry per part category");
        std::copy(counts.begin(), counts.end(), s.type_counts.begin());
    }
    s.train_per_class = j.value("train_per_class", d.train_per_class);
    s.test_per_class = j.value("test_per_class", d.test_per_class);
    s.seed = j.value("seed", d.seed);
    if (j.contains("scene")) {
        const json& c = j.at("scene");
        s.scene.height = c.value("height", d.scene.height);
        s.scene.width = c.value("width", d.scene.width);
        s.scene.num_backgrounds = c.value("num_backgrounds", d.scene.num_backgrounds);
        s.scene.jitter = c.value("jitter", d.scene.jitter);
        s.scene.clutter = c.value("clutter", d.scene.clutter);
    }
    return s;
}

json to_json(const ClassCatalog& c) {
    return json{{"type_counts", c.type_counts}, {"seed", c.seed}, {"classes", c.classes}};
}

ClassCatalog catalog_from_json(const json& j) {
    ClassCatalog c;
    const auto counts = j.at("type_counts").get<std::vector<int>>();
    if (counts.size() != kCategoryCount) throw FormatError("catalog type_counts has the wrong length");
    std::copy(counts.begin(), counts.end(), c.type_counts.begin());
    c.seed = j.value("seed", std::uint64_t{0});
    for (const auto& cls : j.at("classes")) {
        const auto types = cls.get<std::vector<int>>();
        if (types.size() != kCategoryCount) throw FormatError("catalog class has the wrong number of parts");
        PartAssignment a{};
        for (int q = 0; q < kCategoryCount; ++q) {
            if (types[q] < 0 || types[q] >= c.type_counts[q]) throw FormatError("catalog part type out of range");
            a[q] = types[q];
        }
        c.classes.push_back(a);
    }
    return c;
}

std::string record_stem(const SceneRecord& r) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%05d", r.split.c_str(), r.index);
    return buf;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw IoError("cannot write " + path.string());
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

}  // namespace

void write_dataset(const fs::path& dir, const DatasetSpec& spec) {
    const ClassCatalog catalog = build_catalog(spec.num_classes, spec.type_counts, spec.seed);
    const std::vector<SceneRecord> records = plan_dataset(spec);
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    write_text(dir / "dataset.json", json{{"schema_version", kDatasetSchemaVersion}, {"spec", to_json(spec)}}.dump(2) + "\n");
    write_text(dir / "catalog.json", to_json(catalog).dump(2) + "\n");
    std::string manifest;
    for (const SceneRecord& r : records) {
        const Scene s = render_record(r, catalog, spec.scene);
        const std::string stem = record_stem(r);
        write_png(s.image, dir / "images" / (stem + ".png"));
        write_png(s.parts, dir / "masks" / (stem + ".png"));
        manifest += json{{"split", r.split},
                         {"index", r.index},
                         {"class_id", r.class_id},
                         {"placement_seed", r.placement_seed},
                         {"background_id", r.background_id},
                         {"image", "images/" + stem + ".png"},
                         {"mask", "masks/" + stem + ".png"}}
                        .dump() +
                    "\n";
    }
    write_text(dir / "manifest.jsonl", manifest);
}

DatasetOnDisk load_dataset(const fs::path& dir) {
    DatasetOnDisk d;
    d.root = dir;
    if (!fs::exists(dir / "manifest.jsonl")) throw IoError("dataset manifest not found: " + (dir / "manifest.jsonl").string());
    const json meta = read_json(dir / "dataset.json");
    if (meta.value("schema_version", 0) != kDatasetSchemaVersion) throw FormatError("unsupported dataset schema version");
    d.spec = dataset_spec_from_json(meta.at("spec"));
    d.catalog = catalog_from_json(read_json(dir / "catalog.json"));
    std::ifstream in(dir / "manifest.jsonl");
    std::string line;
    bool masks = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json r;
        try {
            r = json::parse(line);
        } catch (const json::exception& e) {
            throw FormatError(std::string("manifest.jsonl: ") + e.what());
        }
        SceneRecord rec;
        rec.split = r.at("split").get<std::string>();
        rec.index = r.at("index").get<int>();
        rec.class_id = r.at("class_id").get<int>();
        rec.placement_seed = r.at("placement_seed").get<std::uint64_t>();
        rec.background_id = r.at("background_id").get<int>();
        if (rec.class_id < 0 || rec.class_id >= d.catalog.num_classes()) throw FormatError("manifest class id out of range");
        d.records.push_back(rec);
        d.image_paths.push_back(r.at("image").get<std::string>());
        masks = masks && r.contains("mask") && fs::exists(dir / r.at("mask").get<std::string>());
    }
    d.has_masks = masks && !d.records.empty();
    return d;
}

std::vector<std::size_t> DatasetOnDisk::split(const std::string& name) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i)
        if (records[i].split == name) out.push_back(i);
    return out;
}

Image DatasetOnDisk::load_image(std::size_t record) const { return read_png_rgb(root / image_paths.at(record)); }

Scene DatasetOnDisk::scene(std::size_t record) const { return render_record(records.at(record), catalog, spec.scene); }

}  // namespace protos
