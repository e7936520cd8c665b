fn main() {
    std::process::exit(pcl_core::cli::run(std::env::args_os()));
}
