"""Built-in scenario definitions shipped as JSON files; copy and edit freely."""
