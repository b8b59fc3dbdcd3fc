// tcap: parse / validate / optimize / plan a dataflow program file.
// Exit codes: 0 ok, 1 diagnostics in the program, 2 I/O trouble.

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "pc/distributed.hpp"
#include "pc/optimizer.hpp"
#include "pc/tcap.hpp"

namespace {

std::string readFile(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::ios_base::failure("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw std::ios_base::failure("cannot read " + path);
    return ss.str();
}

const char* stageKindName(pc::dist::StageKind k) {
    switch (k) {
        case pc::dist::StageKind::Pipeline: return "pipeline";
        case pc::dist::StageKind::Aggregation: return "aggregation";
        case pc::dist::StageKind::BuildHashTable: return "build-hash-table";
    }
    return "?";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dataflow program tool"};
    app.require_subcommand(1);

    std::string file;
    bool trace = false;
    size_t nodes = 1;

    auto addFile = [&](CLI::App* sub) {
        sub->add_option("file", file, "program file")->required();
    };
    auto* parseCmd = app.add_subcommand("parse", "parse and pretty-print");
    addFile(parseCmd);
    auto* validateCmd = app.add_subcommand("validate", "report diagnostics");
    addFile(validateCmd);
    auto* optimizeCmd = app.add_subcommand("optimize", "rewrite to fixpoint and print");
    addFile(optimizeCmd);
    optimizeCmd->add_flag("--trace", trace, "print each rule firing");
    auto* planCmd = app.add_subcommand("plan", "print the job stages");
    addFile(planCmd);
    planCmd->add_option("--nodes", nodes, "cluster size the plan targets");

    CLI11_PARSE(app, argc, argv);

    std::string text;
    try {
        text = readFile(file);
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 2;
    }

    try {
        pc::tcap::Program p = pc::tcap::parse(text, file);
        auto diags = pc::tcap::validate(p);
        if (!diags.empty()) {
            for (const auto& d : diags) std::cerr << d.str() << "\n";
            return 1;
        }

        if (parseCmd->parsed() || validateCmd->parsed()) {
            if (parseCmd->parsed())
                std::cout << pc::tcap::print(p);
            else
                std::cout << "ok: " << p.statements.size() << " statements\n";
            return 0;
        }
        if (optimizeCmd->parsed()) {
            pc::opt::TraceFn tf;
            if (trace)
                tf = [](const std::string& rule, const pc::tcap::Program& after) {
                    std::cerr << "fired " << rule << " -> " << after.statements.size()
                              << " statements\n";
                };
            std::cout << pc::tcap::print(pc::opt::optimize(p, tf));
            return 0;
        }
        // plan
        auto stages = pc::dist::plan_stages(p);
        for (size_t i = 0; i < stages.size(); ++i) {
            const auto& s = stages[i];
            std::cout << i + 1 << ". " << stageKindName(s.kind) << " " << s.name << " in="
                      << s.inputList << " out=" << s.outputList << " stmts=" << s.stmts.size()
                      << "\n";
        }
        std::cout << stages.size() << " job stages (nodes=" << nodes << ")\n";
        return 0;
    } catch (const pc::PcError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
}
