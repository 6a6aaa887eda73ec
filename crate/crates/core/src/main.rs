fn main() {
    std::process::exit(fedgraph::cli::main());
}
