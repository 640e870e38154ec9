use gridify::alloc_count::CountingAlloc;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn main() {
    std::process::exit(gridify::cli::run(std::env::args().collect()));
}
